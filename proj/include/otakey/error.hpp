#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace otakey {

enum class ErrorCode {
  SizeError,
  TagMismatch,
  Malformed,
  WriteToNonErased,
  OutOfRange,
  StaleSlotOccupied,
  CommitRefused,
  Unprovisioned,
  OrderingViolation,
  Nonce1Mismatch,
  ReplayedNonce2,
  UnknownPO,
  AlreadyProvisioned,
  Revoked,
  NoSession,
  CloudUnavailable,
  Busy,
  Timeout,
  Io,
  Config,
  CorruptRegistry,
};

std::string_view to_string(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}
  explicit Error(ErrorCode code) : std::runtime_error(std::string(to_string(code))), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace otakey
