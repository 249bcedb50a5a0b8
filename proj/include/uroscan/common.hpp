#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace uroscan {

// ---------------------------------------------------------------------------
// Error hierarchy. Every failure mode the library reports maps onto one of
// these, so callers (and the CLI exit-code table) can tell them apart.
// ---------------------------------------------------------------------------

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Tensor/layer extent mismatch.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf surfaced by a forward op or an explicit finiteness check.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Contract violation on inputs (bad enum, non-one-hot label, unbound mask...).
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Bad or unknown configuration key/value.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Filesystem-level failure (missing file, unreadable, undecodable).
class IoError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

class CheckpointVersionError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

class CheckpointSpecError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

class CheckpointTruncatedError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

/// ROC curve requested for a single-class score set.
class UndefinedRocError : public Error {
 public:
  using Error::Error;
};

/// Report requested over a bundle with missing run artifacts.
class IncompleteBundleError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// ---------------------------------------------------------------------------
// Element type of tensors. Training runs in f32; gradient-check suites use
// f64 for tight tolerances.
// ---------------------------------------------------------------------------

enum class Dtype : uint8_t { f32 = 0, f64 = 1 };

inline size_t dtype_size(Dtype dt) { return dt == Dtype::f32 ? 4 : 8; }

inline const char* dtype_name(Dtype dt) { return dt == Dtype::f32 ? "f32" : "f64"; }

inline Dtype dtype_from_name(std::string_view name) {
  if (name == "f32") return Dtype::f32;
  if (name == "f64") return Dtype::f64;
  throw ValidationError("unknown dtype name: " + std::string(name));
}

// ---------------------------------------------------------------------------
// Deterministic RNG helpers. mt19937_64 output is pinned by the standard;
// the float mappings below avoid std::uniform_real_distribution, whose
// algorithm is implementation-defined.
// ---------------------------------------------------------------------------

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Folds any number of integer parts into one seed.
inline uint64_t mix_seed(uint64_t seed) { return splitmix64(seed); }

template <class... Rest>
uint64_t mix_seed(uint64_t seed, uint64_t part, Rest... rest) {
  return mix_seed(splitmix64(seed ^ (part + 0x9e3779b97f4a7c15ULL)), rest...);
}

class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  uint64_t next_u64() { return eng_(); }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  uint64_t uniform_index(uint64_t n) { return n == 0 ? 0 : eng_() % n; }

  std::mt19937_64& engine() { return eng_; }

 private:
  std::mt19937_64 eng_;
};

/// Fisher-Yates with the deterministic index mapping above.
template <class T>
void deterministic_shuffle(std::vector<T>& v, Rng& rng) {
  for (size_t i = v.size(); i > 1; --i) {
    size_t j = static_cast<size_t>(rng.uniform_index(i));
    std::swap(v[i - 1], v[j]);
  }
}

// ---------------------------------------------------------------------------
// Content hashing (FNV-1a, 64-bit) for dataset fingerprints and weight
// provenance checks.
// ---------------------------------------------------------------------------

inline uint64_t fnv1a64(const void* bytes, size_t n, uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline uint64_t fnv1a64(std::string_view s, uint64_t h = 0xcbf29ce484222325ULL) {
  return fnv1a64(s.data(), s.size(), h);
}

std::string hex64(uint64_t v);

// ---------------------------------------------------------------------------
// Fixed 64-byte alignment for numeric buffers. SIMD kernels choose their
// prologue by pointer alignment; pinning it makes floating-point reductions
// bit-identical from run to run instead of depending on where the heap
// happened to place an allocation.
// ---------------------------------------------------------------------------

template <class T>
struct AlignedAlloc {
  using value_type = T;
  static constexpr size_t alignment = 64;

  AlignedAlloc() = default;
  template <class U>
  AlignedAlloc(const AlignedAlloc<U>&) {}

  T* allocate(size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t{alignment}));
  }
  void deallocate(T* p, size_t n) {
    ::operator delete(p, n * sizeof(T), std::align_val_t{alignment});
  }
  template <class U>
  bool operator==(const AlignedAlloc<U>&) const {
    return true;
  }
};

template <class T>
using AlignedVec = std::vector<T, AlignedAlloc<T>>;

}  // namespace uroscan
