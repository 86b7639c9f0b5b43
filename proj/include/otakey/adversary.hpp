#pragma once

// Dolev-Yao style harness over concrete protocol runs.
//
// The attacker sees every frame on the device<->agent wire and the device's
// cloud login, can split frames into their fields, and can decrypt a sealed
// body only with a 16-byte term it already knows. It cannot break AES or
// HMAC. The tamper sweep lets it drop, corrupt, replay, reorder or forge
// frames at each delivery point of a run, for every action sequence up to
// a fixed length.

#include <cstdint>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "otakey/messages.hpp"
#include "otakey/testbed.hpp"

namespace otakey::adversary {

using testbed::Flow;

enum class Direction { DeviceToAgent, AgentToDevice, DeviceToCloud, CloudToDevice };
std::string_view to_string(Direction dir);

struct WireEvent {
  Direction direction;
  double timestamp = 0;  // seconds since the run started
  protocol::Frame frame;
};

struct Transcript {
  Flow flow;
  std::vector<WireEvent> events;
};

// Key material the honest parties hold after a run, by name ("PK", "AK",
// "AK-old", "CK", "successTX"). successTX is the full plaintext of the
// sealed confirmation the device sent.
using Secrets = std::vector<std::pair<std::string, Bytes>>;

struct HonestRun {
  Transcript transcript;
  Secrets secrets;
};

HonestRun record_honest_run(Flow flow);

class AttackerKnowledge {
 public:
  void add(ByteView term);
  // Adds the frame and every field the grammar exposes without a key.
  void observe(const protocol::Frame& frame);
  // Decrypts sealed bodies under known keys until nothing new appears.
  void close();

  bool knows(ByteView term) const { return known_.contains(Bytes(term.begin(), term.end())); }
  std::size_t size() const { return known_.size(); }
  std::size_t decryptions() const { return decryptions_; }

 private:
  struct Sealed {
    protocol::MsgType type;
    crypto::SealedMessage message;
    bool opened = false;
  };
  bool insert(ByteView term);
  void split_plaintext(ByteView plaintext);

  std::set<Bytes> known_;
  std::vector<Sealed> sealed_;
  std::size_t decryptions_ = 0;
};

struct SecrecyVerdict {
  bool secret = true;
  std::vector<std::pair<std::string, bool>> derivable;  // name -> attacker knows it
  std::size_t knowledge_size = 0;
  std::size_t decryptions = 0;

  nlohmann::json to_json() const;
};

// `initial` seeds the attacker with extra terms, e.g. a leaked key.
SecrecyVerdict secrecy_check(const HonestRun& run, const std::vector<Bytes>& initial = {});

enum class ActionKind { Drop, FlipBit, Replay, Reorder, InjectUnderKnownKey };
std::string_view to_string(ActionKind kind);

// Delivery points are numbered in send order: exchange k carries the
// device's frame at point 2k and the agent's reply at 2k+1.
struct Tampering {
  ActionKind kind = ActionKind::Drop;
  std::size_t point = 0;
  std::size_t byte = 0;  // FlipBit only; the bit is byte % 8

  std::string describe() const;
};

struct TamperOutcome {
  std::vector<Tampering> sequence;
  std::string device_result;  // "committed", or the abort reason
  bool attacker_accepting = false;
  bool replay_accepted = false;
  std::string detail;
};

struct TamperReport {
  Flow flow;
  int budget = 0;
  std::size_t runs = 0;
  std::size_t attacker_accepting = 0;
  std::size_t replays_accepted = 0;
  std::vector<TamperOutcome> outcomes;

  bool ok() const { return attacker_accepting == 0 && replays_accepted == 0; }
  nlohmann::json to_json() const;
};

// Every action sequence of length <= budget with at most one action per
// delivery point. Bit flips cover every byte of each honest frame for
// budget <= 2, and the first and last byte of each field for budget 3.
TamperReport tamper_sweep(Flow flow, int budget, unsigned threads = 0);

// Replays one sequence; exposed for tests.
TamperOutcome run_tampered(Flow flow, const std::vector<Tampering>& sequence);

}  // namespace otakey::adversary
