#include "otakey/adversary.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <map>
#include <set>
#include <thread>

#include "otakey/error.hpp"

namespace otakey::adversary {

using protocol::Frame;
using protocol::MsgType;
using testbed::Testbed;

std::string_view to_string(Direction dir) {
  switch (dir) {
    case Direction::DeviceToAgent: return "device->agent";
    case Direction::AgentToDevice: return "agent->device";
    case Direction::DeviceToCloud: return "device->cloud";
    case Direction::CloudToDevice: return "cloud->device";
  }
  return "?";
}

std::string_view to_string(ActionKind kind) {
  switch (kind) {
    case ActionKind::Drop: return "Drop";
    case ActionKind::FlipBit: return "FlipBit";
    case ActionKind::Replay: return "Replay";
    case ActionKind::Reorder: return "Reorder";
    case ActionKind::InjectUnderKnownKey: return "InjectUnderKnownKey";
  }
  return "?";
}

std::string Tampering::describe() const {
  std::string s = std::string(to_string(kind)) + "@" + std::to_string(point);
  if (kind == ActionKind::FlipBit) s += ":" + std::to_string(byte) + "." + std::to_string(byte % 8);
  return s;
}

// ---------------------------------------------------------------------------
// Worlds

namespace {

constexpr std::uint64_t kWorldSeed = 11;

class Recorder final : public device::Transport {
 public:
  Recorder(device::Transport& inner, std::vector<WireEvent>& out)
      : inner_(inner), out_(out), start_(std::chrono::steady_clock::now()) {}

  std::optional<Frame> exchange(const Frame& request) override {
    out_.push_back({Direction::DeviceToAgent, elapsed(), request});
    auto reply = inner_.exchange(request);
    if (reply) out_.push_back({Direction::AgentToDevice, elapsed(), *reply});
    return reply;
  }

  double elapsed() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  device::Transport& inner_;
  std::vector<WireEvent>& out_;
  std::chrono::steady_clock::time_point start_;
};

// A testbed positioned just before `flow`, after one earlier honest session
// of the same kind whose frames the attacker captured.
struct World {
  std::unique_ptr<Testbed> tb;
  std::vector<Frame> prior;
};

World make_world(Flow flow) {
  World w;
  w.tb = std::make_unique<Testbed>(testbed::TestbedOptions{kWorldSeed});
  auto& tb = *w.tb;
  std::vector<WireEvent> events;
  Recorder rec(tb.transport, events);
  switch (flow) {
    case Flow::AkInit:
      tb.request_ak(rec);
      // Factory reset: the same device is provisioned again from scratch.
      tb.agent.reset_device(tb.identity.id);
      tb.device = device::burn_device(tb.identity, tb.pk, {}, crypto::Rng(kWorldSeed * 4 + 1000),
                                      tb.device.flash.size());
      break;
    case Flow::AkRotate:
      tb.request_ak(tb.transport);
      tb.rotate_ak(rec);
      break;
    case Flow::CkUpdate:
      tb.request_ak(tb.transport);
      tb.update_ck(rec);
      tb.login();
      break;
  }
  for (auto& e : events) w.prior.push_back(std::move(e.frame));
  return w;
}

std::optional<crypto::SymmetricKey> key_of(const Testbed& tb, flash::KeyKind kind) {
  auto scan = flash::scan_slots(tb.device.flash);
  const auto& r = scan.of(kind);
  if (!r) return std::nullopt;
  return r->record.key;
}

Bytes key_bytes(const crypto::SymmetricKey& k) { return Bytes(k.bytes.begin(), k.bytes.end()); }

}  // namespace

HonestRun record_honest_run(Flow flow) {
  auto world = make_world(flow);
  auto& tb = *world.tb;
  auto ak_before = key_of(tb, flash::KeyKind::AgentKey);

  HonestRun run;
  run.transcript.flow = flow;
  Recorder rec(tb.transport, run.transcript.events);
  tb.run(flow, rec);

  auto ak = key_of(tb, flash::KeyKind::AgentKey);
  auto ck = key_of(tb, flash::KeyKind::CloudKey);
  run.secrets.emplace_back("PK", key_bytes(tb.pk));
  if (ak) run.secrets.emplace_back("AK", key_bytes(*ak));
  if (ak_before && ak_before != ak) run.secrets.emplace_back("AK-old", key_bytes(*ak_before));
  if (ck) run.secrets.emplace_back("CK", key_bytes(*ck));

  for (const auto& e : run.transcript.events) {
    if (e.frame.type != MsgType::AkConfirm && e.frame.type != MsgType::CkConfirm) continue;
    // AkConfirm travels under the new agent key; CkConfirm under the current one.
    auto plaintext = crypto::open(*ak, crypto::SealedMessage::decode(e.frame.body));
    run.secrets.emplace_back("successTX", std::move(plaintext));
  }

  if (ck) {
    // The login exchange is on the wire too.
    auto challenge = tb.cloud.challenge(tb.identity.id);
    auto proof = protocol::cloud_auth_proof(*ck, tb.identity.id, challenge);
    Bytes id(tb.identity.id.begin(), tb.identity.id.end());
    run.transcript.events.push_back(
        {Direction::CloudToDevice, rec.elapsed(), Frame{MsgType::CloudChallengeIssued, id, Bytes(challenge.begin(), challenge.end())}});
    Bytes body(challenge.begin(), challenge.end());
    body.insert(body.end(), proof.begin(), proof.end());
    run.transcript.events.push_back({Direction::DeviceToCloud, rec.elapsed(), Frame{MsgType::CloudAuth, id, body}});
    tb.cloud.authenticate(tb.identity.id, challenge, proof);
  }
  return run;
}

// ---------------------------------------------------------------------------
// Knowledge closure

bool AttackerKnowledge::insert(ByteView term) {
  if (term.empty()) return false;
  return known_.emplace(term.begin(), term.end()).second;
}

void AttackerKnowledge::add(ByteView term) { insert(term); }

void AttackerKnowledge::observe(const Frame& frame) {
  insert(frame.encode());
  std::uint8_t type = static_cast<std::uint8_t>(frame.type);
  insert(ByteView(&type, 1));
  insert(frame.header);
  insert(frame.body);

  bool sealed_type = type >= 0x01 && type <= 0x08;
  if (sealed_type && frame.body.size() >= crypto::kIvSize + crypto::kTagSize + crypto::kIvSize) {
    try {
      auto msg = crypto::SealedMessage::decode(frame.body);
      insert(msg.iv);
      insert(msg.tag);
      insert(msg.ciphertext);
      sealed_.push_back({frame.type, std::move(msg)});
    } catch (const Error&) {
    }
  }
  if (frame.type == MsgType::CloudAuth && frame.body.size() == crypto::kNonceSize + crypto::kTagSize) {
    insert(ByteView(frame.body).first(crypto::kNonceSize));
    insert(ByteView(frame.body).subspan(crypto::kNonceSize));
  }
}

void AttackerKnowledge::split_plaintext(ByteView plaintext) {
  insert(plaintext);
  if (plaintext.empty()) return;
  auto fields = plaintext.subspan(1);
  insert(fields);
  auto nonce = [&](const crypto::Nonce& n) { insert(n); };
  try {
    switch (static_cast<MsgType>(plaintext[0])) {
      case MsgType::AkRequest: {
        auto p = protocol::AkRequestPayload::decode(fields);
        insert(p.id);
        nonce(p.nonce1);
        break;
      }
      case MsgType::AkResponse: {
        auto p = protocol::AkResponsePayload::decode(fields);
        insert(p.ak.view());
        nonce(p.nonce1);
        nonce(p.nonce2);
        break;
      }
      case MsgType::AkConfirm: {
        auto p = protocol::AkConfirmPayload::decode(fields);
        nonce(p.nonce2);
        nonce(p.nonce3);
        break;
      }
      case MsgType::AkAck:
      case MsgType::CkAck:
        nonce(protocol::AckPayload::decode(fields).nonce3);
        break;
      case MsgType::CkRequest:
        nonce(protocol::CkRequestPayload::decode(fields).nonce1);
        break;
      case MsgType::CkResponse: {
        auto p = protocol::CkResponsePayload::decode(fields);
        insert(p.cloud_key.view());
        insert(p.connection_info);
        nonce(p.nonce1);
        nonce(p.nonce2);
        break;
      }
      case MsgType::CkConfirm: {
        auto p = protocol::CkConfirmPayload::decode(fields);
        nonce(p.nonce2);
        nonce(p.nonce3);
        break;
      }
      default:
        break;
    }
  } catch (const Error&) {
  }
}

void AttackerKnowledge::close() {
  for (;;) {
    std::size_t before = known_.size();
    std::vector<crypto::SymmetricKey> keys;
    for (const auto& term : known_) {
      if (term.size() == crypto::kKeySize) keys.push_back(crypto::SymmetricKey::from_bytes(term));
    }
    for (auto& s : sealed_) {
      if (s.opened) continue;
      for (const auto& k : keys) {
        try {
          auto plaintext = crypto::open(k, s.message);
          ++decryptions_;
          s.opened = true;
          split_plaintext(plaintext);
          break;
        } catch (const Error&) {
        }
      }
    }
    if (known_.size() == before) return;
  }
}

nlohmann::json SecrecyVerdict::to_json() const {
  nlohmann::json j{{"secret", secret}, {"knowledge_size", knowledge_size}, {"decryptions", decryptions}};
  for (const auto& [name, known] : derivable) j["terms"][name] = known ? "derivable" : "secret";
  return j;
}

SecrecyVerdict secrecy_check(const HonestRun& run, const std::vector<Bytes>& initial) {
  AttackerKnowledge k;
  for (const auto& t : initial) k.add(t);
  for (const auto& e : run.transcript.events) k.observe(e.frame);
  k.close();

  SecrecyVerdict v;
  for (const auto& [name, value] : run.secrets) {
    bool known = k.knows(value);
    v.derivable.emplace_back(name, known);
    if (known) v.secret = false;
  }
  v.knowledge_size = k.size();
  v.decryptions = k.decryptions();
  return v;
}

// ---------------------------------------------------------------------------
// Tampering

namespace {

class AttackerTransport final : public device::Transport {
 public:
  AttackerTransport(Testbed& tb, const std::vector<Frame>& prior, const std::vector<Tampering>& seq,
                    AttackerKnowledge& knowledge)
      : tb_(tb), prior_(prior), knowledge_(knowledge), rng_(kWorldSeed * 977) {
    for (const auto& t : seq) actions_[t.point] = t;
    for (std::size_t i = 0; i < prior.size(); ++i) delivered_[i % 2].insert(prior[i].encode());
  }

  std::optional<Frame> exchange(const Frame& request) override {
    std::size_t p = 2 * exchanges_++;
    if (awaiting_reaction_) {
      // The device reacted to a tampered reply by moving on to confirm it.
      if (request.type == MsgType::AkConfirm || request.type == MsgType::CkConfirm) {
        replay_notes_.push_back("device confirmed a tampered reply at " + std::to_string(*awaiting_reaction_));
      }
      awaiting_reaction_.reset();
    }
    last_request_type_ = request.type;

    knowledge_.observe(request);
    seen_[p] = request;
    auto to_agent = apply(p, request);
    if (!to_agent) return std::nullopt;

    Frame reply;
    if (to_agent->type == MsgType::Error && to_agent->body.empty() && to_agent->header.empty()) {
      reply = protocol::error_frame(protocol::ErrorReason::BadRequest);  // undecodable on the wire
    } else {
      reply = tb_.agent.handle(*to_agent);
    }
    if (tampered(p) && reply.type != MsgType::Error) {
      replay_notes_.push_back("agent accepted a tampered frame at " + std::to_string(p));
    }

    knowledge_.observe(reply);
    seen_[p + 1] = reply;
    auto to_device = apply(p + 1, reply);
    if (!to_device) return std::nullopt;
    if (to_device->type == MsgType::Error && to_device->body.empty() && to_device->header.empty()) {
      return std::nullopt;
    }
    if (tampered(p + 1)) {
      awaiting_reaction_ = p + 1;
      last_reply_tampered_ = true;
    } else {
      last_reply_tampered_ = false;
    }
    return to_device;
  }

  const std::vector<std::string>& replay_notes() const { return replay_notes_; }
  bool last_reply_tampered() const { return last_reply_tampered_; }
  std::optional<MsgType> last_request_type() const { return last_request_type_; }

 private:
  // True when the frame delivered at `point` differs from what was sent,
  // unless it is an old frame the receiver is seeing for the first time
  // (a delayed delivery rather than a replay).
  bool tampered(std::size_t point) const { return altered_.contains(point) && !first_sight_.contains(point); }

  // nullopt drops; an empty Error frame stands for bytes that no longer parse.
  std::optional<Frame> apply(std::size_t point, const Frame& frame) {
    auto it = actions_.find(point);
    if (it == actions_.end()) {
      delivered_[point % 2].insert(frame.encode());
      return frame;
    }
    const Tampering& t = it->second;
    std::optional<Frame> out = frame;
    switch (t.kind) {
      case ActionKind::Drop:
        return std::nullopt;
      case ActionKind::FlipBit: {
        Bytes wire = frame.encode();
        if (t.byte >= wire.size()) return frame;
        wire[t.byte] ^= static_cast<std::uint8_t>(1u << (t.byte % 8));
        try {
          out = Frame::decode(wire);
        } catch (const Error&) {
          altered_.insert(point);
          return Frame{MsgType::Error, {}, {}};
        }
        break;
      }
      case ActionKind::Replay:
        if (point < prior_.size()) out = prior_[point];
        break;
      case ActionKind::Reorder:
        if (point >= 2 && seen_.contains(point - 2)) out = seen_[point - 2];
        break;
      case ActionKind::InjectUnderKnownKey:
        out = forge(frame);
        break;
    }
    if (!(*out == frame)) {
      altered_.insert(point);
      bool substituted = t.kind == ActionKind::Replay || t.kind == ActionKind::Reorder;
      if (substituted && !delivered_[point % 2].contains(out->encode())) first_sight_.insert(point);
    }
    delivered_[point % 2].insert(out->encode());
    knowledge_.observe(*out);
    return out;
  }

  // A well-formed frame of the same type, sealed under a key the attacker
  // made up and therefore knows.
  Frame forge(const Frame& like) {
    auto key = rng_.key();
    knowledge_.add(key.view());
    auto nonce = [&] { return rng_.nonce(); };
    Bytes fields;
    Bytes header = like.header;
    switch (like.type) {
      case MsgType::AkRequest:
        fields = protocol::AkRequestPayload{tb_.identity.id, nonce()}.encode();
        break;
      case MsgType::AkResponse: {
        auto ak = rng_.key();
        knowledge_.add(ak.view());
        protocol::AkResponsePayload p{ak, nonce(), nonce()};
        auto mac = protocol::ak_binding_mac(p);
        header.assign(mac.begin(), mac.end());
        fields = p.encode();
        break;
      }
      case MsgType::AkConfirm:
        fields = protocol::AkConfirmPayload{nonce(), nonce(), protocol::kSuccessTx}.encode();
        break;
      case MsgType::AkAck:
      case MsgType::CkAck:
        fields = protocol::AckPayload{nonce()}.encode();
        break;
      case MsgType::CkRequest:
        fields = protocol::CkRequestPayload{protocol::kRequestTx, nonce()}.encode();
        break;
      case MsgType::CkResponse: {
        auto ck = rng_.key();
        knowledge_.add(ck.view());
        fields = protocol::CkResponsePayload{ck, to_bytes("mqtts://attacker.example:8883"), nonce(), nonce()}.encode();
        break;
      }
      case MsgType::CkConfirm:
        fields = protocol::CkConfirmPayload{protocol::kSuccessTx, nonce(), nonce()}.encode();
        break;
      default:
        return like;
    }
    return protocol::seal_frame(like.type, header, key, fields, rng_);
  }

  Testbed& tb_;
  const std::vector<Frame>& prior_;
  AttackerKnowledge& knowledge_;
  crypto::Rng rng_;
  std::map<std::size_t, Tampering> actions_;
  std::map<std::size_t, Frame> seen_;
  std::set<std::size_t> altered_;
  std::set<std::size_t> first_sight_;
  std::set<Bytes> delivered_[2];  // [0] to the agent, [1] to the device
  std::size_t exchanges_ = 0;
  std::optional<std::size_t> awaiting_reaction_;
  bool last_reply_tampered_ = false;
  std::optional<MsgType> last_request_type_;
  std::vector<std::string> replay_notes_;
};

std::string join(const std::vector<std::string>& parts) {
  std::string out;
  for (const auto& p : parts) out += (out.empty() ? "" : "; ") + p;
  return out;
}

}  // namespace

TamperOutcome run_tampered(Flow flow, const std::vector<Tampering>& sequence) {
  auto world = make_world(flow);
  auto& tb = *world.tb;
  const auto& id = tb.identity.id;

  auto ak_before = key_of(tb, flash::KeyKind::AgentKey);
  auto ck_before = key_of(tb, flash::KeyKind::CloudKey);
  const auto* entry_before = tb.registry.find(id);
  auto agent_active_before = entry_before ? entry_before->ak : std::nullopt;
  auto acks_before = tb.device.acks_missing;
  auto stats_before = tb.agent.stats();

  AttackerKnowledge knowledge;
  for (const auto& f : world.prior) knowledge.observe(f);
  AttackerTransport transport(tb, world.prior, sequence, knowledge);

  TamperOutcome out;
  out.sequence = sequence;
  bool completed = false;
  try {
    tb.run(flow, transport);
    completed = true;
    out.device_result = tb.device.acks_missing > acks_before ? "committed, ack missing" : "committed";
  } catch (const Error& e) {
    out.device_result = std::string("abort: ") + std::string(to_string(e.code()));
  } catch (const std::exception& e) {
    out.device_result = std::string("abort: ") + e.what();
  }

  std::vector<std::string> findings;
  if (auto why = tb.key_consistency_violation(); !why.empty()) findings.push_back(why);

  auto ak_now = key_of(tb, flash::KeyKind::AgentKey);
  auto ck_now = key_of(tb, flash::KeyKind::CloudKey);
  if (completed != (ak_now != ak_before || (flow == Flow::CkUpdate && ck_now != ck_before))) {
    findings.push_back("device key state does not match the flow result");
  }

  const auto* entry = tb.registry.find(id);
  if (entry && entry->status == agent::EntryStatus::Active && entry->ak != agent_active_before &&
      entry->ak != ak_now) {
    findings.push_back("agent finalized a key the device does not hold");
  }
  auto stats = tb.agent.stats();
  if (stats.ck_finalized > stats_before.ck_finalized) {
    auto rec = tb.cloud.record(id);
    if (!rec || !rec->new_key || rec->new_key != ck_now) {
      findings.push_back("cloud activated a key the device does not hold");
    }
  }

  knowledge.close();
  if (knowledge.knows(tb.pk.view())) findings.push_back("attacker knows PK");
  if (ak_now && knowledge.knows(ak_now->view())) findings.push_back("attacker knows the device's agent key");
  if (ck_now && knowledge.knows(ck_now->view())) findings.push_back("attacker knows the device's cloud key");

  auto notes = transport.replay_notes();
  bool confirm_was_last = transport.last_request_type() == MsgType::AkConfirm ||
                          transport.last_request_type() == MsgType::CkConfirm;
  if (completed && confirm_was_last && transport.last_reply_tampered() && tb.device.acks_missing == acks_before) {
    notes.push_back("device accepted a tampered ack");
  }

  out.attacker_accepting = !findings.empty();
  out.replay_accepted = !notes.empty();
  findings.insert(findings.end(), notes.begin(), notes.end());
  out.detail = join(findings);
  return out;
}

namespace {

// Byte offsets to flip in one frame.
std::vector<std::size_t> flip_positions(const Frame& frame, bool every_byte) {
  std::size_t size = frame.encode().size();
  std::vector<std::size_t> pos;
  if (every_byte) {
    for (std::size_t i = 0; i < size; ++i) pos.push_back(i);
    return pos;
  }
  std::size_t h = frame.header.size();
  std::size_t b = 2 + h;
  std::vector<std::pair<std::size_t, std::size_t>> fields{{0, 1}, {1, 2}, {2, b}};
  if (frame.body.size() >= crypto::kIvSize + crypto::kTagSize) {
    fields.push_back({b, b + crypto::kIvSize});
    fields.push_back({b + crypto::kIvSize, b + crypto::kIvSize + crypto::kTagSize});
    fields.push_back({b + crypto::kIvSize + crypto::kTagSize, size});
  } else {
    fields.push_back({b, size});
  }
  for (auto [lo, hi] : fields) {
    if (lo >= hi) continue;
    pos.push_back(lo);
    if (hi - 1 != lo) pos.push_back(hi - 1);
  }
  return pos;
}

std::vector<std::vector<Tampering>> enumerate(Flow flow, int budget) {
  auto world = make_world(flow);
  auto honest = record_honest_run(flow);
  std::vector<Frame> frames;
  for (const auto& e : honest.transcript.events) {
    if (e.direction == Direction::DeviceToAgent || e.direction == Direction::AgentToDevice) frames.push_back(e.frame);
  }

  std::vector<std::vector<Tampering>> per_point(frames.size());
  for (std::size_t p = 0; p < frames.size(); ++p) {
    auto& a = per_point[p];
    a.push_back({ActionKind::Drop, p});
    for (auto byte : flip_positions(frames[p], budget <= 2)) a.push_back({ActionKind::FlipBit, p, byte});
    if (p < world.prior.size()) a.push_back({ActionKind::Replay, p});
    if (p >= 2) a.push_back({ActionKind::Reorder, p});
    a.push_back({ActionKind::InjectUnderKnownKey, p});
  }

  std::vector<std::vector<Tampering>> out{{}};
  std::vector<Tampering> cur;
  auto rec = [&](auto&& self, std::size_t from) -> void {
    if (static_cast<int>(cur.size()) == budget) return;
    for (std::size_t p = from; p < per_point.size(); ++p) {
      for (const auto& t : per_point[p]) {
        cur.push_back(t);
        out.push_back(cur);
        self(self, p + 1);
        cur.pop_back();
      }
    }
  };
  rec(rec, 0);
  return out;
}

}  // namespace

nlohmann::json TamperReport::to_json() const {
  nlohmann::json j{{"flow", testbed::to_string(flow)},
                   {"budget", budget},
                   {"runs", runs},
                   {"attacker_accepting", attacker_accepting},
                   {"replays_accepted", replays_accepted},
                   {"ok", ok()}};
  auto& arr = j["outcomes"] = nlohmann::json::array();
  for (const auto& o : outcomes) {
    nlohmann::json seq = nlohmann::json::array();
    for (const auto& t : o.sequence) seq.push_back(t.describe());
    nlohmann::json row{{"sequence", seq},
                       {"device", o.device_result},
                       {"attacker_accepting", o.attacker_accepting},
                       {"replay_accepted", o.replay_accepted}};
    if (!o.detail.empty()) row["detail"] = o.detail;
    arr.push_back(std::move(row));
  }
  return j;
}

TamperReport tamper_sweep(Flow flow, int budget, unsigned threads) {
  if (budget < 0 || budget > 3) throw Error(ErrorCode::Config, "budget must be between 0 and 3");
  auto sequences = enumerate(flow, budget);

  TamperReport report;
  report.flow = flow;
  report.budget = budget;
  report.outcomes.resize(sequences.size());

  if (threads == 0) threads = std::max(1u, std::min(8u, std::thread::hardware_concurrency()));
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < sequences.size();) {
      report.outcomes[i] = run_tampered(flow, sequences[i]);
    }
  };
  std::vector<std::thread> pool;
  for (unsigned t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  report.runs = sequences.size();
  for (const auto& o : report.outcomes) {
    report.attacker_accepting += o.attacker_accepting;
    report.replays_accepted += o.replay_accepted;
  }
  return report;
}

}  // namespace otakey::adversary
