#pragma once

#include <stdexcept>
#include <string>

namespace inrseg {

// Error classes are stable one-word tokens so CLI failures stay machine-parsable.
class Error : public std::runtime_error {
 public:
  Error(std::string cls, const std::string& msg)
      : std::runtime_error(cls + ": " + msg), cls_(std::move(cls)) {}
  const std::string& error_class() const { return cls_; }

 private:
  std::string cls_;
};

[[noreturn]] inline void raise(const char* cls, const std::string& msg) {
  throw Error(cls, msg);
}

[[noreturn]] inline void raise_invalid_shape(const std::string& msg) { raise("invalid-shape", msg); }
[[noreturn]] inline void raise_invalid_config(const std::string& msg) { raise("config-error", msg); }
[[noreturn]] inline void raise_domain(const std::string& msg) { raise("domain-error", msg); }
[[noreturn]] inline void raise_io(const std::string& msg) { raise("io-error", msg); }
[[noreturn]] inline void raise_numeric(const std::string& msg) { raise("numeric-error", msg); }
[[noreturn]] inline void raise_generation(const std::string& msg) { raise("generation-error", msg); }
[[noreturn]] inline void raise_oracle(const std::string& msg) { raise("oracle-invalid", msg); }
[[noreturn]] inline void raise_invariant(const std::string& msg) { raise("invariant-violation", msg); }
[[noreturn]] inline void raise_usage(const std::string& msg) { raise("usage-error", msg); }

}  // namespace inrseg
