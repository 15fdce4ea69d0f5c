#pragma once

#include <stdexcept>
#include <string>

namespace translora {

// Every failure raised by the library derives from Error and carries a short
// machine-readable kind ("DimensionMismatch", "BudgetExhausted", ...).
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(kind + ": " + what), kind_(std::move(kind)) {}

  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

#define TRANSLORA_DEFINE_ERROR(Name)                                      \
  class Name : public Error {                                             \
   public:                                                                \
    explicit Name(const std::string& what) : Error(#Name, what) {}        \
  };

TRANSLORA_DEFINE_ERROR(DimensionMismatch)
TRANSLORA_DEFINE_ERROR(LengthMismatch)
TRANSLORA_DEFINE_ERROR(InvalidTemperature)
TRANSLORA_DEFINE_ERROR(StepOutOfRange)
TRANSLORA_DEFINE_ERROR(InvalidDistribution)
TRANSLORA_DEFINE_ERROR(UnsupportedCharacter)
TRANSLORA_DEFINE_ERROR(SequenceTooLong)
TRANSLORA_DEFINE_ERROR(ShapeMismatch)
TRANSLORA_DEFINE_ERROR(EmptyCompletion)
TRANSLORA_DEFINE_ERROR(PromptTooLong)
TRANSLORA_DEFINE_ERROR(InitTextTooLong)
TRANSLORA_DEFINE_ERROR(EmptyDataset)
TRANSLORA_DEFINE_ERROR(ExhaustedSpace)
TRANSLORA_DEFINE_ERROR(ParseError)
TRANSLORA_DEFINE_ERROR(KTooLarge)
TRANSLORA_DEFINE_ERROR(EmptySplit)
TRANSLORA_DEFINE_ERROR(EmptySeedSet)
TRANSLORA_DEFINE_ERROR(GenerationBudgetExhausted)
TRANSLORA_DEFINE_ERROR(SizeMismatch)
TRANSLORA_DEFINE_ERROR(EmptyCorpus)
TRANSLORA_DEFINE_ERROR(TooFewSamples)
TRANSLORA_DEFINE_ERROR(DimMismatch)
TRANSLORA_DEFINE_ERROR(GapNotAchieved)
TRANSLORA_DEFINE_ERROR(CheckpointError)
TRANSLORA_DEFINE_ERROR(ConfigError)
TRANSLORA_DEFINE_ERROR(DataAccessViolation)

#undef TRANSLORA_DEFINE_ERROR

}  // namespace translora
