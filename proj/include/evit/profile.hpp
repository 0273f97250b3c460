#pragma once

#include <array>
#include <chrono>
#include <cstdint>
#include <cstddef>

namespace evit {

// Buckets for per-op attribution. The memory-bound set is everything that
// moves bytes without doing a matmul-shaped amount of arithmetic:
// reshape_copy + elementwise + normalization + softmax.
enum class OpCategory : uint8_t {
  matmul_conv = 0,
  reshape_copy,
  elementwise,
  normalization,
  softmax,
  other,
};
inline constexpr size_t kOpCategoryCount = 6;

inline const char* op_category_name(OpCategory c) {
  switch (c) {
    case OpCategory::matmul_conv: return "matmul_conv";
    case OpCategory::reshape_copy: return "reshape_copy";
    case OpCategory::elementwise: return "elementwise";
    case OpCategory::normalization: return "normalization";
    case OpCategory::softmax: return "softmax";
    case OpCategory::other: return "other";
  }
  return "other";
}

inline bool op_category_memory_bound(OpCategory c) {
  return c == OpCategory::reshape_copy || c == OpCategory::elementwise ||
         c == OpCategory::normalization || c == OpCategory::softmax;
}

struct OpProfile {
  std::array<double, kOpCategoryCount> seconds{};
  std::array<uint64_t, kOpCategoryCount> calls{};

  double total_seconds() const {
    double t = 0;
    for (double s : seconds) t += s;
    return t;
  }
  uint64_t total_calls() const {
    uint64_t n = 0;
    for (uint64_t c : calls) n += c;
    return n;
  }
};

namespace detail {
inline thread_local OpProfile* g_active_profile = nullptr;
inline thread_local int g_op_depth = 0;
}  // namespace detail

inline OpProfile* active_profile() { return detail::g_active_profile; }

// Scoped activation; ops self-report while a profile is installed.
struct ProfileScope {
  explicit ProfileScope(OpProfile* p) : prev_(detail::g_active_profile) {
    detail::g_active_profile = p;
  }
  ~ProfileScope() { detail::g_active_profile = prev_; }
  ProfileScope(const ProfileScope&) = delete;
  ProfileScope& operator=(const ProfileScope&) = delete;

 private:
  OpProfile* prev_;
};

// RAII timer placed at the top of each op. Only depth-0 calls are recorded
// so an op implemented in terms of another op cannot double-count.
class ProfiledOp {
 public:
  explicit ProfiledOp(OpCategory cat) : cat_(cat) {
    top_level_ = (detail::g_op_depth == 0) && detail::g_active_profile != nullptr;
    ++detail::g_op_depth;
    if (top_level_) start_ = std::chrono::steady_clock::now();
  }
  ~ProfiledOp() {
    --detail::g_op_depth;
    if (top_level_) {
      const auto end = std::chrono::steady_clock::now();
      OpProfile* p = detail::g_active_profile;
      p->seconds[static_cast<size_t>(cat_)] += std::chrono::duration<double>(end - start_).count();
      p->calls[static_cast<size_t>(cat_)] += 1;
    }
  }
  ProfiledOp(const ProfiledOp&) = delete;
  ProfiledOp& operator=(const ProfiledOp&) = delete;

 private:
  OpCategory cat_;
  bool top_level_;
  std::chrono::steady_clock::time_point start_;
};

}  // namespace evit
