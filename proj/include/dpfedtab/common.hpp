// Copyright 2026 The dpfedtab Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>

namespace dpfedtab {

// Process exit codes used by the CLI. Every exception type below maps to one.
enum class ExitCode : int {
  kOk = 0,
  kValidation = 1,
  kDivergence = 2,
  kBudget = 3,
};

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what, ExitCode code = ExitCode::kValidation)
      : std::runtime_error(what), code_(code) {}
  ExitCode code() const { return code_; }

 private:
  ExitCode code_;
};

// Column missing, duplicated, or of the wrong kind.
class SchemaError : public Error {
 public:
  explicit SchemaError(const std::string& what) : Error("schema error: " + what) {}
};

// Malformed input file content.
class ParseError : public Error {
 public:
  explicit ParseError(const std::string& what) : Error("parse error: " + what) {}
};

// Precondition or configuration violation.
class ValidationError : public Error {
 public:
  explicit ValidationError(const std::string& what) : Error(what) {}
};

// Non-finite loss, gradient, parameter or sample.
class DivergenceError : public Error {
 public:
  explicit DivergenceError(const std::string& what)
      : Error("divergence: " + what, ExitCode::kDivergence) {}
};

// The requested privacy budget cannot be met.
class BudgetError : public Error {
 public:
  explicit BudgetError(const std::string& what)
      : Error("privacy budget: " + what, ExitCode::kBudget) {}
};

using Rng = std::mt19937_64;

// splitmix64 finalizer; used to derive independent stream seeds.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Seed for a named sub-stream: derive_seed(seed, a, b, ...) is a
// deterministic function of all arguments in order.
inline std::uint64_t derive_seed(std::uint64_t seed) { return mix64(seed); }

template <typename... Rest>
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t first, Rest... rest) {
  return derive_seed(mix64(seed ^ mix64(first + 0x632be59bd9b4e019ULL)),
                     static_cast<std::uint64_t>(rest)...);
}

inline double standard_normal(Rng& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  return dist(rng);
}

inline double uniform01(Rng& rng) {
  std::uniform_real_distribution<double> dist(0.0, 1.0);
  return dist(rng);
}

// Uniform integer in [lo, hi].
inline std::size_t uniform_index(Rng& rng, std::size_t lo, std::size_t hi) {
  std::uniform_int_distribution<std::size_t> dist(lo, hi);
  return dist(rng);
}

// 64-bit FNV-1a. Stable across platforms, used for config and file hashes.
inline std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

inline bool all_finite(const double* data, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(data[i])) return false;
  }
  return true;
}

}  // namespace dpfedtab
