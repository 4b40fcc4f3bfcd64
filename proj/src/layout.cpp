#include "flowscope/layout.hpp"

#include <numeric>

namespace flowscope {

std::string_view segment_name(Segment s) noexcept {
  switch (s) {
    case Segment::system: return "system";
    case Segment::image: return "image";
    case Segment::user: return "user";
    case Segment::generated: return "generated";
  }
  return "unknown";
}

std::vector<std::size_t> IdRange::ids() const {
  std::vector<std::size_t> out(count);
  std::iota(out.begin(), out.end(), first);
  return out;
}

Segment TokenLayout::segment_of(std::size_t id) const noexcept {
  if (system().contains(id)) return Segment::system;
  if (image().contains(id)) return Segment::image;
  if (user().contains(id)) return Segment::user;
  return Segment::generated;
}

}  // namespace flowscope
