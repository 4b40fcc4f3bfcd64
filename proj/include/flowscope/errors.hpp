#pragma once

#include <stdexcept>
#include <string>

namespace flowscope {

// Shape disagreement between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A caller broke a documented precondition.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Sequence does not fit the model's positional capacity.
class CapacityError : public std::length_error {
 public:
  using std::length_error::length_error;
};

// Softmax row with no admissible entry.
class DegenerateRowError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace flowscope
