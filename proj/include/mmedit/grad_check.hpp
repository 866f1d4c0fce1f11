#pragma once

#include "mmedit/nn.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace mmedit {

struct GradGroupReport {
  std::string name;
  double max_rel_err = 0.0;
  int coordinates = 0;
  bool frozen = false;
  // Frozen groups must report an analytic gradient of exactly zero.
  bool analytic_zero = true;
};

struct GradCheckReport {
  std::vector<GradGroupReport> groups;
  double max_rel_err() const;
  bool passed(double tol) const;
  std::string to_text() const;
};

struct GradCheckOptions {
  double h = 1e-5;
  int coordinates_per_group = 50;  // every coordinate when the group is smaller
  std::uint64_t seed = 0;
};

// `analytic` must leave d loss / d param in Param::grad; `loss` evaluates the
// same objective without touching gradients. Each Param is one group.
GradCheckReport grad_check(const nn::ParamList& params, const std::function<double()>& loss,
                           const std::function<void()>& analytic, const GradCheckOptions& options = {});

double relative_error(double a, double b);

}  // namespace mmedit

namespace mmedit {

// Finite-difference checks of the three training objectives on small
// configurations (each under 5,000 parameters). `frozen_backbone` checks the
// stage-1 setting where only the projections and new token rows train.
GradCheckReport check_llm_gradients(bool frozen_backbone, std::uint64_t seed = 0, const GradCheckOptions& options = {});
GradCheckReport check_prior_gradients(std::uint64_t seed = 0, const GradCheckOptions& options = {});
GradCheckReport check_diffusion_gradients(std::uint64_t seed = 0, const GradCheckOptions& options = {});

}  // namespace mmedit
