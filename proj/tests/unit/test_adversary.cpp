#include <gtest/gtest.h>

#include "otakey/adversary.hpp"

using namespace otakey;
using namespace otakey::adversary;

namespace {

Bytes secret(const HonestRun& run, const std::string& name) {
  for (const auto& [n, b] : run.secrets) {
    if (n == name) return b;
  }
  ADD_FAILURE() << "no secret " << name;
  return {};
}

}  // namespace

TEST(Secrecy, HonestRunsLeakNothing) {
  for (auto flow : {Flow::AkInit, Flow::AkRotate, Flow::CkUpdate}) {
    auto run = record_honest_run(flow);
    auto v = secrecy_check(run);
    EXPECT_TRUE(v.secret) << to_string(flow) << " " << v.to_json().dump();
    EXPECT_FALSE(run.transcript.events.empty());
  }
}

TEST(Secrecy, LeakedProductKeyExposesTheFirstAgentKey) {
  auto run = record_honest_run(Flow::AkInit);
  auto v = secrecy_check(run, {secret(run, "PK")});
  EXPECT_FALSE(v.secret);
  bool ak_known = false;
  for (const auto& [name, known] : v.derivable) {
    if (name == "AK") ak_known = known;
  }
  EXPECT_TRUE(ak_known);
  EXPECT_GT(v.decryptions, 0u);
}

TEST(Secrecy, LeakedAgentKeyExposesTheCloudKey) {
  auto run = record_honest_run(Flow::CkUpdate);
  auto v = secrecy_check(run, {secret(run, "AK")});
  EXPECT_FALSE(v.secret);
}

TEST(Knowledge, DecryptsOnlyUnderKnownKeys) {
  crypto::Rng rng(1);
  auto key = crypto::generate_key(2);
  Bytes inner = to_bytes("0123456789abcdef");
  auto frame = protocol::seal_frame(protocol::MsgType::CkResponse, {}, key, inner, rng);
  AttackerKnowledge k;
  k.observe(frame);
  k.close();
  EXPECT_EQ(k.decryptions(), 0u);
  k.add(Bytes(key.bytes.begin(), key.bytes.end()));
  k.close();
  EXPECT_EQ(k.decryptions(), 1u);
}

TEST(Tamper, BudgetOneAllFlows) {
  for (auto flow : {Flow::AkInit, Flow::AkRotate, Flow::CkUpdate}) {
    auto r = tamper_sweep(flow, 1);
    EXPECT_TRUE(r.ok()) << r.to_json().dump();
    EXPECT_GT(r.runs, 100u);
  }
}

TEST(Tamper, FlippedResponseIsRejected) {
  // Point 1 is the agent's first reply.
  for (std::size_t byte : {0u, 5u, 20u, 40u, 70u}) {
    auto out = run_tampered(Flow::AkInit, {{ActionKind::FlipBit, 1, byte}});
    EXPECT_EQ(out.device_result.rfind("abort", 0), 0u) << byte << ": " << out.device_result;
    EXPECT_FALSE(out.attacker_accepting);
  }
}

TEST(Tamper, ReplayedRequestIsNotAccepted) {
  auto out = run_tampered(Flow::AkRotate, {{ActionKind::Replay, 2}});
  EXPECT_FALSE(out.replay_accepted) << out.detail;
  EXPECT_FALSE(out.attacker_accepting);
}

TEST(Tamper, UntouchedRunCommits) {
  auto out = run_tampered(Flow::CkUpdate, {});
  EXPECT_EQ(out.device_result, "committed");
}
