#include "doctest.h"

#include "mmedit/grad_check.hpp"

#include <iostream>

using namespace mmedit;

TEST_CASE("llm objective matches finite differences") {
  const auto report = check_llm_gradients(false);
  INFO(report.to_text());
  CHECK(report.passed(1e-4));
}

TEST_CASE("prior objective matches finite differences") {
  const auto report = check_prior_gradients();
  INFO(report.to_text());
  CHECK(report.passed(1e-4));
}

TEST_CASE("diffusion objective matches finite differences") {
  const auto report = check_diffusion_gradients();
  INFO(report.to_text());
  CHECK(report.passed(1e-4));
}

TEST_CASE("frozen backbone reports exact zero gradients") {
  const auto report = check_llm_gradients(true);
  INFO(report.to_text());
  CHECK(report.passed(1e-4));
  bool saw_frozen = false;
  for (const auto& g : report.groups) saw_frozen = saw_frozen || g.frozen;
  CHECK(saw_frozen);
}
