#pragma once

#include <stdexcept>
#include <string>

namespace nbisect {

// Base of every failure raised by the library. Each subclass names one
// contract violation; callers map them to exit codes at the CLI boundary.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define NBISECT_DEFINE_ERROR(Name)      \
  class Name : public Error {           \
   public:                              \
    using Error::Error;                 \
  }

NBISECT_DEFINE_ERROR(InvalidConfig);
NBISECT_DEFINE_ERROR(PlacementInfeasible);
NBISECT_DEFINE_ERROR(ShapeMismatch);
NBISECT_DEFINE_ERROR(GraphCycle);
NBISECT_DEFINE_ERROR(UnlabeledNumerosity);
NBISECT_DEFINE_ERROR(MissingNumerosity);
NBISECT_DEFINE_ERROR(EmptySample);
NBISECT_DEFINE_ERROR(DegenerateFit);
NBISECT_DEFINE_ERROR(ConvergenceFailure);
NBISECT_DEFINE_ERROR(InsufficientReplicates);
NBISECT_DEFINE_ERROR(DegenerateInput);
NBISECT_DEFINE_ERROR(PlanInvalid);
NBISECT_DEFINE_ERROR(ManifestInvalid);

#undef NBISECT_DEFINE_ERROR

// Training produced a non-finite loss. Carries the step and seed so replicate
// failures are attributable.
class Divergence : public Error {
 public:
  Divergence(const std::string& what, long step, unsigned long long seed)
      : Error(what), step_(step), seed_(seed) {}
  long step() const noexcept { return step_; }
  unsigned long long seed() const noexcept { return seed_; }

 private:
  long step_;
  unsigned long long seed_;
};

}  // namespace nbisect
