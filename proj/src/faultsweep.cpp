#include "otakey/faultsweep.hpp"

#include <functional>

#include "otakey/error.hpp"

namespace otakey::faultsweep {

using testbed::Flow;
using testbed::Testbed;

std::string_view to_string(ProtocolCut cut) {
  switch (cut) {
    case ProtocolCut::DropRequest: return "drop-request";
    case ProtocolCut::DropReply: return "drop-reply";
    case ProtocolCut::DieBeforeSend: return "die-before-send";
    case ProtocolCut::DieAfterDelivery: return "die-after-delivery";
  }
  return "?";
}

std::string CutPoint::describe() const {
  if (protocol) {
    return variant + " exchange " + std::to_string(exchange) + " " + std::string(to_string(kind));
  }
  return variant + " op " + std::to_string(op) + (erase ? " (erase)" : " (program)") + " tear " +
         std::to_string(tear);
}

nlohmann::json SweepReport::to_json() const {
  nlohmann::json j;
  j["cut_points"] = cut_points;
  j["ok"] = ok();
  auto& vs = j["variants"] = nlohmann::json::array();
  for (const auto& v : variants) {
    vs.push_back({{"name", v.name},
                  {"flow", testbed::to_string(v.flow)},
                  {"flash_ops", v.flash_ops},
                  {"cut_points", v.cut_points}});
  }
  auto& viol = j["violations"] = nlohmann::json::array();
  for (const auto& v : violations) viol.push_back({{"cut", v.cut.describe()}, {"reason", v.reason}});
  return j;
}

namespace {

struct Variant {
  std::string name;
  Flow flow;
  std::size_t connection_info_size;
  std::function<void(Testbed&)> prepare;
};

void run_flow(Testbed& tb, Flow flow, device::Transport& t) { tb.run(flow, t); }

std::vector<Variant> variants_of(Flow flow) {
  auto ak = [](Testbed& tb) { tb.request_ak(tb.transport); };
  auto ak_rot = [](Testbed& tb) {
    tb.request_ak(tb.transport);
    tb.rotate_ak(tb.transport);
  };
  auto ak_ck = [](Testbed& tb) {
    tb.request_ak(tb.transport);
    tb.update_ck(tb.transport);
    tb.login();
  };
  switch (flow) {
    case Flow::AkInit:
      return {{"ak-init", flow, 0, [](Testbed&) {}}};
    case Flow::AkRotate:
      return {{"ak-rotate/first", flow, 0, ak}, {"ak-rotate/second", flow, 0, ak_rot}};
    case Flow::CkUpdate:
      return {{"ck-update/initial", flow, 0, ak},
              {"ck-update/replace", flow, 0, ak_ck},
              {"ck-update/initial-512", flow, protocol::kMaxConnectionInfo, ak},
              {"ck-update/replace-512", flow, protocol::kMaxConnectionInfo, ak_ck}};
  }
  return {};
}

// Injects one protocol-level fault at exchange index `at`.
class CuttingTransport final : public device::Transport {
 public:
  CuttingTransport(device::Transport& inner, flash::FlashImage& flash, int at, ProtocolCut kind)
      : inner_(inner), flash_(flash), at_(at), kind_(kind) {}

  std::optional<protocol::Frame> exchange(const protocol::Frame& request) override {
    if (count_++ != at_) return inner_.exchange(request);
    switch (kind_) {
      case ProtocolCut::DropRequest:
        return std::nullopt;
      case ProtocolCut::DropReply:
        inner_.exchange(request);
        return std::nullopt;
      case ProtocolCut::DieBeforeSend:
        flash_.power_off();
        throw flash::PowerCut{};
      case ProtocolCut::DieAfterDelivery:
        inner_.exchange(request);
        flash_.power_off();
        throw flash::PowerCut{};
    }
    return std::nullopt;
  }

 private:
  device::Transport& inner_;
  flash::FlashImage& flash_;
  int count_ = 0;
  int at_;
  ProtocolCut kind_;
};

flash::KeyKind kind_of(Flow flow) {
  return flow == Flow::CkUpdate ? flash::KeyKind::CloudKey : flash::KeyKind::AgentKey;
}

std::optional<flash::KeySlotRecord> active_record(const Testbed& tb, flash::KeyKind kind) {
  auto scan = flash::scan_slots(tb.device.flash);
  const auto& r = scan.of(kind);
  if (!r) return std::nullopt;
  return r->record;
}

std::unique_ptr<Testbed> fresh(const Variant& v) {
  testbed::TestbedOptions o;
  o.seed = 7;
  o.connection_info_size = v.connection_info_size;
  auto tb = std::make_unique<Testbed>(o);
  v.prepare(*tb);
  return tb;
}

// Returns the first violated property after rebooting, or "".
std::string check_after_cut(Testbed& tb, const Variant& v, const std::optional<flash::KeySlotRecord>& before) {
  device::device_boot(tb.device);
  if (auto why = tb.key_consistency_violation(); !why.empty()) return why;

  auto kind = kind_of(v.flow);
  auto now = active_record(tb, kind);
  if (before) {
    if (!now) return "previous record lost";
    if (now->seq == before->seq && !(*now == *before)) return "record changed without a new sequence number";
    if (now->seq != before->seq && now->seq != before->seq + 1) return "unexpected sequence number";
  }
  if (tb.device.flash.raw().empty()) return "flash vanished";

  // Liveness: the cloud session still works and the flow can run again.
  if (flash::scan_slots(tb.device.flash).cloud && !tb.login()) return "cloud login failed after reboot";
  try {
    bool ak_done = v.flow == Flow::AkInit && flash::scan_slots(tb.device.flash).agent.has_value();
    if (!ak_done) run_flow(tb, v.flow, tb.transport);
  } catch (const std::exception& e) {
    return std::string("flow did not complete after reboot: ") + e.what();
  }
  if (auto why = tb.key_consistency_violation(); !why.empty()) return "after rerun: " + why;
  if (flash::scan_slots(tb.device.flash).cloud && !tb.login()) return "cloud login failed after rerun";
  if (!flash::scan_slots(tb.device.flash).agent) return "no agent key after rerun";
  return {};
}

void sweep_variant(const Variant& v, Granularity g, SweepReport& report) {
  VariantSummary summary{v.name, v.flow};

  // Dry run to learn which ops the flow performs.
  std::vector<flash::FlashImage::OpKind> trace;
  {
    auto tb = fresh(v);
    tb->device.flash.set_tracing(true);
    run_flow(*tb, v.flow, tb->transport);
    trace = tb->device.flash.op_trace();
  }
  summary.flash_ops = trace.size();

  auto attempt = [&](const CutPoint& cut, const std::function<void(Testbed&)>& run) {
    auto tb = fresh(v);
    auto before = active_record(*tb, kind_of(v.flow));
    std::string why;
    try {
      run(*tb);
    } catch (const flash::PowerCut&) {
    } catch (const Error&) {
      // Aborted flows must leave the device consistent too.
    }
    try {
      why = check_after_cut(*tb, v, before);
    } catch (const std::exception& e) {
      why = std::string("exception during recovery: ") + e.what();
    }
    ++summary.cut_points;
    if (!why.empty()) report.violations.push_back({cut, why});
  };

  for (std::uint64_t i = 0; i < trace.size(); ++i) {
    bool erase = trace[i] == flash::FlashImage::OpKind::Erase;
    std::vector<std::size_t> tears{0};
    if (g == Granularity::Word) {
      tears = erase ? std::vector<std::size_t>{0, 1, flash::kPageSize / 2}
                    : std::vector<std::size_t>{0, 1, 2, 3};
    }
    for (auto tear : tears) {
      CutPoint cut{v.name, false, i, tear, erase};
      attempt(cut, [&](Testbed& tb) {
        tb.device.flash.arm_power_cut(tb.device.flash.op_count() + i, tear);
        run_flow(tb, v.flow, tb.transport);
      });
    }
  }

  for (int ex = 0; ex < 2; ++ex) {
    for (auto kind : {ProtocolCut::DropRequest, ProtocolCut::DropReply, ProtocolCut::DieBeforeSend,
                      ProtocolCut::DieAfterDelivery}) {
      CutPoint cut{v.name, true};
      cut.exchange = ex;
      cut.kind = kind;
      attempt(cut, [&](Testbed& tb) {
        CuttingTransport t(tb.transport, tb.device.flash, ex, kind);
        run_flow(tb, v.flow, t);
      });
    }
  }

  report.cut_points += summary.cut_points;
  report.variants.push_back(summary);
}

}  // namespace

SweepReport faultsweep(Flow flow, Granularity granularity) {
  SweepReport report;
  for (const auto& v : variants_of(flow)) sweep_variant(v, granularity, report);
  return report;
}

SweepReport faultsweep_all(Granularity granularity) {
  SweepReport report;
  for (auto flow : {Flow::AkInit, Flow::AkRotate, Flow::CkUpdate}) {
    for (const auto& v : variants_of(flow)) sweep_variant(v, granularity, report);
  }
  return report;
}

}  // namespace otakey::faultsweep
