// Copyright 2026 The ckv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace ckv {

/// Base class for every error raised by the library. The CLI maps any
/// ckv::Error to exit code 1.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

#define CKV_DEFINE_ERROR(Name)                                   \
  class Name : public Error {                                    \
   public:                                                       \
    explicit Name(const std::string& what) : Error(#Name ": " + what) {} \
  }

CKV_DEFINE_ERROR(FormatError);
CKV_DEFINE_ERROR(TruncationError);
CKV_DEFINE_ERROR(ValidationError);
CKV_DEFINE_ERROR(ParameterError);
CKV_DEFINE_ERROR(InputError);
CKV_DEFINE_ERROR(SelectionError);
CKV_DEFINE_ERROR(DegenerateHeadError);
CKV_DEFINE_ERROR(DegenerateRiskError);
CKV_DEFINE_ERROR(DegenerateRowError);
CKV_DEFINE_ERROR(DataError);
CKV_DEFINE_ERROR(FitError);
CKV_DEFINE_ERROR(ConfigError);
CKV_DEFINE_ERROR(CoverageError);
CKV_DEFINE_ERROR(CompatibilityError);

#undef CKV_DEFINE_ERROR

}  // namespace ckv
