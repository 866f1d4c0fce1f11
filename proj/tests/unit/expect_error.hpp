#pragma once

#include "mmedit/core.hpp"

#include <doctest.h>

#include <string>

// Runs `fn` and checks that it throws mmedit::Error with `code`.
template <class Fn>
void expect_error(Fn&& fn, mmedit::ErrorCode code) {
  try {
    fn();
    FAIL("expected error " << std::string(mmedit::to_string(code)));
  } catch (const mmedit::Error& e) {
    CHECK_MESSAGE(e.code() == code, "got " << std::string(mmedit::to_string(e.code())) << ": " << e.what());
  }
}
