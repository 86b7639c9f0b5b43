#pragma once

// Power-cut and message-loss sweep over the three key-update flows.
//
// Every flash op the device performs during a flow is a cut point, at
// several tear offsets; so is every protocol exchange (request dropped,
// reply dropped, device dead before sending, device dead after delivery).
// After each cut the device reboots and must (a) present a key the agent
// accepts, (b) hold a cloud key the cloud accepts, (c) hold for each key
// kind either its previous record or the freshly written one, and (d) be
// able to log in and complete the flow again.

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "otakey/testbed.hpp"

namespace otakey::faultsweep {

enum class Granularity {
  Op,    // one cut per flash op, nothing of the op applied
  Word,  // every op at several tear offsets
};

enum class ProtocolCut { DropRequest, DropReply, DieBeforeSend, DieAfterDelivery };
std::string_view to_string(ProtocolCut cut);

struct CutPoint {
  std::string variant;
  bool protocol = false;
  std::uint64_t op = 0;  // relative to the start of the flow
  std::size_t tear = 0;
  bool erase = false;
  int exchange = 0;
  ProtocolCut kind = ProtocolCut::DropRequest;

  std::string describe() const;
};

struct Violation {
  CutPoint cut;
  std::string reason;
};

struct VariantSummary {
  std::string name;
  testbed::Flow flow;
  std::uint64_t flash_ops = 0;
  std::size_t cut_points = 0;
};

struct SweepReport {
  std::size_t cut_points = 0;
  std::vector<VariantSummary> variants;
  std::vector<Violation> violations;

  bool ok() const { return violations.empty(); }
  nlohmann::json to_json() const;
};

// Sweeps every variant of `flow` (first and repeated runs, short and
// maximal connection info for the cloud flow).
SweepReport faultsweep(testbed::Flow flow, Granularity granularity = Granularity::Word);
SweepReport faultsweep_all(Granularity granularity = Granularity::Word);

}  // namespace otakey::faultsweep
