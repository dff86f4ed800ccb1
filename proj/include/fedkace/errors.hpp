#pragma once

#include <stdexcept>
#include <string>

namespace fedkace {

// Invalid configuration value or incompatible tensor shapes.
struct config_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Empty mask, or a category id outside the model's output range.
struct invalid_mask_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A caller violated an operation precondition.
struct contract_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Stored buffer content disagrees with the owner's category history.
struct buffer_corruption_error : contract_error {
  using contract_error::contract_error;
};

// Non-finite gradients or parameters encountered during training.
struct divergence_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A metric was requested over an empty evaluation set.
struct metric_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Filesystem failure; the message carries the offending path.
struct io_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace fedkace
