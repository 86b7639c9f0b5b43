#include <gtest/gtest.h>

#include "otakey/error.hpp"
#include "otakey/testbed.hpp"

using namespace otakey;
using namespace otakey::testbed;
using device::Check;

namespace {

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error thrown";
  return ErrorCode::Io;
}

// Passes frames through and remembers every reply.
class Recorder final : public device::Transport {
 public:
  explicit Recorder(device::Transport& inner) : inner_(inner) {}
  std::optional<protocol::Frame> exchange(const protocol::Frame& request) override {
    auto reply = inner_.exchange(request);
    if (reply) replies.push_back(*reply);
    return reply;
  }
  std::vector<protocol::Frame> replies;

 private:
  device::Transport& inner_;
};

// Answers every request with a canned reply.
class Canned final : public device::Transport {
 public:
  explicit Canned(protocol::Frame reply) : reply_(std::move(reply)) {}
  std::optional<protocol::Frame> exchange(const protocol::Frame&) override { return reply_; }

 private:
  protocol::Frame reply_;
};

// Flips one byte of the first reply of the given type.
class Tamper final : public device::Transport {
 public:
  Tamper(device::Transport& inner, protocol::MsgType type) : inner_(inner), type_(type) {}
  std::optional<protocol::Frame> exchange(const protocol::Frame& request) override {
    auto reply = inner_.exchange(request);
    if (reply && reply->type == type_ && !done_) {
      reply->body.back() ^= 0x01;
      done_ = true;
    }
    return reply;
  }

 private:
  device::Transport& inner_;
  protocol::MsgType type_;
  bool done_ = false;
};

}  // namespace

TEST(AkInit, HonestRunErasesProductKey) {
  Testbed tb;
  EXPECT_EQ(tb.device.phase(), device::Phase::Burned);
  tb.request_ak(tb.transport);
  auto scan = flash::boot_scan(tb.device.flash);
  EXPECT_FALSE(scan.product);
  ASSERT_TRUE(scan.agent);
  EXPECT_NE(scan.agent->record.key, tb.pk);
  EXPECT_EQ(tb.device.phase(), device::Phase::AkIssued);
  const auto* entry = tb.registry.find(tb.identity.id);
  ASSERT_NE(entry, nullptr);
  EXPECT_EQ(entry->status, agent::EntryStatus::Active);
  EXPECT_EQ(*entry->ak, scan.agent->record.key);
  EXPECT_EQ(tb.key_consistency_violation(), "");
  EXPECT_EQ(tb.device.acks_missing, 0u);
}

TEST(AkInit, ChecksRunInOrder) {
  Testbed tb;
  tb.request_ak(tb.transport);
  EXPECT_EQ(tb.device.check_trace, (std::vector<Check>{Check::Nonce1, Check::Nonce2, Check::Mac}));
}

TEST(AkInit, WrongProductKeyAbortsAndKeepsIt) {
  Testbed tb;
  auto wrong = crypto::generate_key(999);
  auto dev = device::burn_device(tb.identity, wrong, {}, crypto::Rng(5));
  EXPECT_EQ(code_of([&] { device::device_request_ak(dev, tb.transport, Testbed::no_wait()); }),
            ErrorCode::TagMismatch);
  auto scan = flash::boot_scan(dev.flash);
  ASSERT_TRUE(scan.product);
  EXPECT_EQ(scan.product->record.key, wrong);
  EXPECT_FALSE(scan.agent);
}

TEST(AkInit, UnknownProductOrder) {
  Testbed tb;
  protocol::DeviceIdentity other{tb.identity.id, protocol::ProductOrder{9, 9, 9, 9, 9, 9, 9, 9}};
  auto dev = device::burn_device(other, tb.pk, {}, crypto::Rng(5));
  EXPECT_EQ(code_of([&] { device::device_request_ak(dev, tb.transport, Testbed::no_wait()); }),
            ErrorCode::UnknownPO);
}

TEST(AkInit, ReplayedResponseIsRejectedByNonce2) {
  Testbed tb;
  auto before = tb.device;  // same RNG state, so the retry reuses nonce1
  Recorder rec(tb.transport);
  tb.request_ak(rec);
  ASSERT_FALSE(rec.replies.empty());
  auto old_response = rec.replies.front();
  ASSERT_EQ(old_response.type, protocol::MsgType::AkResponse);

  before.seen_nonce2 = tb.device.seen_nonce2;
  Canned replay(old_response);
  EXPECT_EQ(code_of([&] { device::device_request_ak(before, replay, Testbed::no_wait()); }),
            ErrorCode::ReplayedNonce2);
  EXPECT_EQ(before.check_trace.back(), Check::Nonce2);
  EXPECT_TRUE(flash::boot_scan(before.flash).product);
}

TEST(AkInit, ResponseForAnotherRequestFailsNonce1) {
  Testbed tb;
  Recorder rec(tb.transport);
  auto twin = tb.device;
  tb.request_ak(rec);
  twin.rng.next_u64();  // different nonce1 from here on
  Canned replay(rec.replies.front());
  EXPECT_EQ(code_of([&] { device::device_request_ak(twin, replay, Testbed::no_wait()); }),
            ErrorCode::Nonce1Mismatch);
}

TEST(AkInit, SecondRequestIsRefused) {
  Testbed tb;
  tb.request_ak(tb.transport);
  auto again = device::burn_device(tb.identity, tb.pk, {}, crypto::Rng(77));
  EXPECT_EQ(code_of([&] { device::device_request_ak(again, tb.transport, Testbed::no_wait()); }),
            ErrorCode::AlreadyProvisioned);
  // The device that already has a key cannot run init again either.
  EXPECT_EQ(code_of([&] { tb.request_ak(tb.transport); }), ErrorCode::OrderingViolation);
}

TEST(AkInit, DroppedRepliesTimeOut) {
  struct Drop final : device::Transport {
    std::optional<protocol::Frame> exchange(const protocol::Frame&) override { return std::nullopt; }
  } drop;
  Testbed tb;
  std::vector<double> waits;
  device::RetryPolicy retry;
  retry.sleep = [&](double s) { waits.push_back(s); };
  EXPECT_EQ(code_of([&] { device::device_request_ak(tb.device, drop, retry); }), ErrorCode::Timeout);
  EXPECT_FALSE(waits.empty());
  EXPECT_TRUE(flash::boot_scan(tb.device.flash).product);
}

TEST(AkRotate, SeqAdvancesAndOnlyLatestKeyIsAccepted) {
  Testbed tb;
  tb.request_ak(tb.transport);
  auto ak1 = flash::boot_scan(tb.device.flash).agent->record;
  tb.rotate_ak(tb.transport);
  auto ak2 = flash::boot_scan(tb.device.flash).agent->record;
  tb.rotate_ak(tb.transport);
  auto ak3 = flash::boot_scan(tb.device.flash).agent->record;
  EXPECT_EQ(ak3.seq, ak1.seq + 2);
  EXPECT_NE(ak1.key, ak2.key);
  EXPECT_NE(ak2.key, ak3.key);
  EXPECT_FALSE(tb.agent.accepts_device_key(tb.identity.id, tb.identity.po, ak1.key));
  EXPECT_FALSE(tb.agent.accepts_device_key(tb.identity.id, tb.identity.po, ak2.key));
  EXPECT_TRUE(tb.agent.accepts_device_key(tb.identity.id, tb.identity.po, ak3.key));
  EXPECT_FALSE(tb.agent.accepts_device_key(tb.identity.id, tb.identity.po, tb.pk));
}

TEST(AkRotate, TamperedResponseKeepsOldKey) {
  Testbed tb;
  tb.request_ak(tb.transport);
  auto old = flash::boot_scan(tb.device.flash).agent->record;
  Tamper t(tb.transport, protocol::MsgType::AkResponse);
  EXPECT_EQ(code_of([&] { tb.rotate_ak(t); }), ErrorCode::TagMismatch);
  EXPECT_EQ(flash::boot_scan(tb.device.flash).agent->record, old);
  EXPECT_EQ(tb.key_consistency_violation(), "");
  // A clean retry still works.
  tb.rotate_ak(tb.transport);
  EXPECT_EQ(flash::boot_scan(tb.device.flash).agent->record.seq, old.seq + 1);
}

TEST(CkUpdate, ProvisionsAndReplacesCloudKey) {
  Testbed tb;
  tb.request_ak(tb.transport);
  EXPECT_FALSE(tb.login());
  tb.update_ck(tb.transport);
  EXPECT_EQ(tb.device.phase(), device::Phase::CloudProvisioned);
  auto ck1 = flash::boot_scan(tb.device.flash).cloud->record;
  EXPECT_FALSE(ck1.payload.empty());
  EXPECT_TRUE(tb.login());
  tb.update_ck(tb.transport);
  auto ck2 = flash::boot_scan(tb.device.flash).cloud->record;
  EXPECT_NE(ck1.key, ck2.key);
  EXPECT_TRUE(tb.login());
  EXPECT_FALSE(tb.cloud.accepts(tb.identity.id, ck1.key));
  EXPECT_EQ(tb.key_consistency_violation(), "");
}

TEST(CkUpdate, RequiresAgentKey) {
  Testbed tb;
  EXPECT_EQ(code_of([&] { tb.update_ck(tb.transport); }), ErrorCode::OrderingViolation);
}

TEST(CkUpdate, TamperedResponseKeepsOldCloudKey) {
  Testbed tb;
  tb.request_ak(tb.transport);
  tb.update_ck(tb.transport);
  ASSERT_TRUE(tb.login());
  auto old = flash::boot_scan(tb.device.flash).cloud->record;
  Tamper t(tb.transport, protocol::MsgType::CkResponse);
  EXPECT_THROW(tb.update_ck(t), Error);
  EXPECT_EQ(flash::boot_scan(tb.device.flash).cloud->record, old);
  EXPECT_TRUE(tb.login());
}

TEST(CkUpdate, LargeConnectionInfo) {
  TestbedOptions o;
  o.connection_info_size = protocol::kMaxConnectionInfo;
  Testbed tb(o);
  tb.request_ak(tb.transport);
  tb.update_ck(tb.transport);
  EXPECT_EQ(flash::boot_scan(tb.device.flash).cloud->record.payload.size(), protocol::kMaxConnectionInfo);
  EXPECT_TRUE(tb.login());
}

TEST(DevicePersistence, SaveLoadKeepsIdentityAndKeys) {
  Testbed tb;
  tb.request_ak(tb.transport);
  auto path = std::filesystem::temp_directory_path() / "otakey_device_roundtrip.bin";
  device::save_device(tb.device, path);
  auto back = device::load_device(path);
  EXPECT_EQ(back.identity, tb.identity);
  EXPECT_EQ(back.flash.raw(), tb.device.flash.raw());
  std::filesystem::remove(path);
  std::filesystem::remove(path.string() + ".json");
}
