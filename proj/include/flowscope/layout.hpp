#pragma once

#include <cstddef>
#include <string_view>
#include <vector>

namespace flowscope {

enum class Segment { system, image, user, generated };

std::string_view segment_name(Segment s) noexcept;

// Contiguous run of 1-based token ids. count == 0 means empty.
struct IdRange {
  std::size_t first = 1;
  std::size_t count = 0;

  std::size_t last() const noexcept { return first + count - 1; }
  bool empty() const noexcept { return count == 0; }
  bool contains(std::size_t id) const noexcept { return count > 0 && id >= first && id <= last(); }
  std::vector<std::size_t> ids() const;
};

// Partition of a prompt into system, image and user tokens. Token ids are
// 1-based: S = {1..N_sys}, I = {N_sys+1..N_sys+N_img},
// U = {N_sys+N_img+1..N_sys+N_img+N_user}. Ids past the prompt belong to
// generated tokens.
class TokenLayout {
 public:
  TokenLayout() = default;
  TokenLayout(std::size_t n_system, std::size_t n_image, std::size_t n_user)
      : n_system_(n_system), n_image_(n_image), n_user_(n_user) {}

  std::size_t n_system() const noexcept { return n_system_; }
  std::size_t n_image() const noexcept { return n_image_; }
  std::size_t n_user() const noexcept { return n_user_; }
  // |G|
  std::size_t prompt_length() const noexcept { return n_system_ + n_image_ + n_user_; }

  IdRange system() const noexcept { return {1, n_system_}; }
  IdRange image() const noexcept { return {n_system_ + 1, n_image_}; }
  IdRange user() const noexcept { return {n_system_ + n_image_ + 1, n_user_}; }
  IdRange prompt() const noexcept { return {1, prompt_length()}; }

  Segment segment_of(std::size_t id) const noexcept;

  friend bool operator==(const TokenLayout&, const TokenLayout&) = default;

 private:
  std::size_t n_system_ = 0;
  std::size_t n_image_ = 0;
  std::size_t n_user_ = 0;
};

}  // namespace flowscope
