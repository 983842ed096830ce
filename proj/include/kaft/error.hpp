// Copyright 2026 The kaft-dialog Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <stdexcept>
#include <string>

namespace kaft {

// Numeric values are part of the C ABI (kaft_status in kaft.h).
enum class ErrorCode : int {
  kOk = 0,
  kInvalidArgument = 1,
  kParse = 2,
  kNotFound = 3,
  kIo = 4,
  kTraining = 5,
  kTransport = 6,
  kTimeout = 7,
  kRateLimited = 8,
  kMalformedReply = 9,
  kCacheMiss = 10,
  kConflict = 11,
  kInternal = 12,
};

const char* error_code_name(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace kaft
