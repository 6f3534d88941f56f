#pragma once

#include <atomic>

namespace metaphor {

// Deliberate backward-rule corruption, used to prove that the gradient
// checker catches sign errors. Never set outside of tests and `gradcheck`.
enum class Fault { none, lstm_backward_sign, gru_backward_sign, conv_backward_sign };

inline std::atomic<Fault>& injected_fault() {
  static std::atomic<Fault> fault{Fault::none};
  return fault;
}

class ScopedFault {
 public:
  explicit ScopedFault(Fault f) : previous_(injected_fault().exchange(f)) {}
  ~ScopedFault() { injected_fault().store(previous_); }
  ScopedFault(const ScopedFault&) = delete;
  ScopedFault& operator=(const ScopedFault&) = delete;

 private:
  Fault previous_;
};

}  // namespace metaphor
