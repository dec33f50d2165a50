#pragma once

#include <stdexcept>
#include <string>

namespace dadapt {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Checkpoint or artifact fails its integrity check (bad checksum,
// version mismatch, wrong parameter layout).
struct IntegrityError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Non-finite loss or gradient during a training stage.
struct TrainingDivergence : std::runtime_error {
  TrainingDivergence(const std::string& what, int step)
      : std::runtime_error(what + " (step " + std::to_string(step) + ")"), step_index(step) {}
  int step_index;
};

}  // namespace dadapt
