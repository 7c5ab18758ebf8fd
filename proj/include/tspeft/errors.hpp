#pragma once

#include <stdexcept>
#include <string>

namespace tspeft {

// Every failure raised by the library derives from Error. The kind() string
// is what the CLI prints in its machine-readable error line.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

#define TSPEFT_DEFINE_ERROR(Name, tag)                                   \
  class Name : public Error {                                           \
   public:                                                              \
    explicit Name(const std::string& what) : Error(tag, what) {}        \
  };

TSPEFT_DEFINE_ERROR(ShapeError, "shape_error")
TSPEFT_DEFINE_ERROR(ConfigError, "config_error")
TSPEFT_DEFINE_ERROR(ContractError, "contract_error")
TSPEFT_DEFINE_ERROR(NumericalError, "numerical_error")
TSPEFT_DEFINE_ERROR(EmptyInputError, "empty_input_error")
TSPEFT_DEFINE_ERROR(OptimizerError, "optimizer_error")
TSPEFT_DEFINE_ERROR(TrainingError, "training_error")
TSPEFT_DEFINE_ERROR(CheckpointError, "checkpoint_error")
TSPEFT_DEFINE_ERROR(ArtifactError, "artifact_error")
TSPEFT_DEFINE_ERROR(SelectionError, "selection_error")

#undef TSPEFT_DEFINE_ERROR

}  // namespace tspeft
