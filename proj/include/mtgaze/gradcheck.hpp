#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "mtgaze/tape.hpp"

namespace mtgaze {

// One differentiable unit under test. `forward` recomputes the output from
// the current contents of the probed tensors (perturbed in place).
struct GradcheckCase {
  std::string name;
  std::function<Tensor(GradTape*)> forward;
  std::vector<std::pair<std::string, Tensor*>> probes;
  std::shared_ptr<void> state;  // owns the probed tensors
};

struct GradcheckOptions {
  double eps = 2e-2;
  int probes_per_tensor = 24;
  // Combine steps eps and eps/2 so curvature does not force a tiny eps,
  // where float32 rounding of the output dominates.
  bool richardson = true;
  // Per-entry floor of the error denominator, as a fraction of the rms
  // analytic gradient over every probed tensor of the case. Keeps a nearly
  // dead head (gradient 1e-3 of its neighbours) from being judged on noise.
  double floor_fraction = 1e-2;
};

struct GradcheckResult {
  std::string name;
  // max over probed tensors of |a - n|_2 / max(|a|_2, |n|_2, floor * sqrt(k)),
  // taken over the k probed entries of that tensor
  double worst_rel_error = 0.0;
  std::string worst_tensor;
  // largest single-entry |a - n| / max(|a|, |n|); noisy for tiny entries
  double worst_entry_rel_error = 0.0;
  std::string worst_entry;  // tensor[index]
  int probes = 0;
  // probes whose +eps or -eps forward took a different branch somewhere
  // (relu, hswish, abs, max) than the unperturbed one
  int kinks_skipped = 0;
};

// Loss = sum(output * R) for a fixed random R; analytic gradients come from
// the tape, numeric ones from central differences of the loss in double.
// A float32 forward puts roughly ulp(output) / eps of noise on each numeric
// entry, which is why the headline error is per tensor rather than per entry.
GradcheckResult check_case(GradcheckCase& c, std::uint64_t seed, const GradcheckOptions& opt = {});

// conv2d, dense, activations, batchnorm, pool2d, uc, bneck, sca, gcm, mrm, loss
std::vector<GradcheckCase> standard_cases(std::uint64_t seed);
std::vector<GradcheckResult> run_gradcheck(std::uint64_t seed, const GradcheckOptions& opt = {});

}  // namespace mtgaze
