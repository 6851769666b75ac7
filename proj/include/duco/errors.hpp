#pragma once

#include <stdexcept>
#include <string>

namespace duco {

// Invalid configuration or missing configuration-level input.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// On-disk data violates the dataset invariants.
struct DataIntegrityError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A caller broke a usage contract (e.g. training through an unfrozen dual
// network, mutating a frozen model).
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

// A prerequisite artifact (snapshot, checkpoint) is absent.
struct DependencyError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace duco
