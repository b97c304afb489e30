#pragma once

#include <doctest.h>

#include <functional>

#include "psgmae/common.hpp"

namespace psgmae::test {

// Runs f, which must throw PsgError, and returns the error kind.
inline ErrKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const PsgError& e) {
    return e.kind();
  }
  FAIL("expected a PsgError");
  return ErrKind::InvalidConfig;
}

}  // namespace psgmae::test
