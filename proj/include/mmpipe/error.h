// Copyright 2026 The mmpipe Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace mmpipe {

// Broad failure classes. The CLI maps them onto process exit codes.
enum class ErrorKind {
  kInvalidInput,       // malformed or out-of-range input
  kInfeasible,         // no allocation / partition / configuration exists
  kInternalInvariant,  // a guarantee of the algorithms was violated
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void throw_invalid(const std::string& what) {
  throw Error(ErrorKind::kInvalidInput, what);
}

[[noreturn]] inline void throw_infeasible(const std::string& what) {
  throw Error(ErrorKind::kInfeasible, what);
}

[[noreturn]] inline void throw_invariant(const std::string& what) {
  throw Error(ErrorKind::kInternalInvariant, what);
}

}  // namespace mmpipe
