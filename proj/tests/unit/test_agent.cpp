#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <thread>

#include "otakey/error.hpp"
#include "otakey/testbed.hpp"

using namespace otakey;
using namespace otakey::agent;
using testbed::device_id_for;
using testbed::kDefaultPo;

namespace {

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& name) : path(std::filesystem::temp_directory_path() / name) {
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

// One agent, one cloud and any number of devices from the same order.
struct Fleet {
  crypto::SymmetricKey pk = crypto::generate_key(100);
  Registry registry;
  cloud::CloudService cloud{{}, crypto::Rng(101)};
  std::int64_t now = 1700000000;
  Agent agent;

  explicit Fleet(std::int64_t expected = 1000, std::optional<std::filesystem::path> journal = std::nullopt)
      : registry(journal ? Registry(*journal) : Registry()),
        agent(registry, cloud, crypto::Rng(102), [this] { return now; }) {
    registry.add_product_order(ProductOrderRecord{kDefaultPo, pk, expected, 1690000000, 1710000000, false});
  }

  device::DeviceState make(std::uint64_t index) {
    return device::burn_device({device_id_for(index), kDefaultPo}, pk, {}, crypto::Rng(index + 7));
  }
  device::DeviceState provision(std::uint64_t index) {
    auto dev = make(index);
    device::LocalTransport t(agent);
    device::device_request_ak(dev, t);
    return dev;
  }
};

crypto::SymmetricKey ak_of(const device::DeviceState& dev) { return flash::boot_scan(dev.flash).agent->record.key; }

}  // namespace

TEST(Agent, RevokePoDisablesEveryDeviceFromIt) {
  Fleet f;
  std::vector<device::DeviceState> devs;
  for (int i = 0; i < 3; ++i) {
    devs.push_back(f.provision(i));
    device::LocalTransport t(f.agent);
    device::device_update_cloud_key(devs.back(), t);
  }
  EXPECT_EQ(f.agent.revoke_po(kDefaultPo), 3u);
  for (auto& d : devs) {
    EXPECT_EQ(f.registry.find(d.identity.id)->status, EntryStatus::Revoked);
    EXPECT_FALSE(device::device_cloud_login(d, f.cloud));
    EXPECT_FALSE(f.agent.accepts_device_key(d.identity.id, kDefaultPo, ak_of(d)));
  }
  // New devices from the revoked order are turned away.
  auto late = f.make(50);
  device::LocalTransport t(f.agent);
  EXPECT_THROW(device::device_request_ak(late, t), Error);
  EXPECT_EQ(f.agent.revoke_device(device_id_for(999)), 0u);
  EXPECT_EQ(f.agent.revoke_device(devs[0].identity.id), 0u);
}

TEST(Agent, RevokedDeviceCannotRotate) {
  Fleet f;
  auto dev = f.provision(1);
  EXPECT_EQ(f.agent.revoke_device(dev.identity.id), 1u);
  device::LocalTransport t(f.agent);
  try {
    device::device_rotate_ak(dev, t);
    FAIL() << "rotation went through";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::Revoked);
  }
}

TEST(Agent, LeakDrillFlagsOverActivation) {
  Fleet f(10);
  for (int i = 0; i < 10; ++i) f.provision(i);
  EXPECT_EQ(f.agent.anomaly_scan(kDefaultPo).verdict, AnomalyVerdict::Normal);
  for (int i = 10; i < 15; ++i) f.provision(i);
  auto report = f.agent.anomaly_scan(kDefaultPo);
  EXPECT_EQ(report.observed_activations, 15);
  EXPECT_EQ(report.expected_count, 10);
  EXPECT_EQ(report.verdict, AnomalyVerdict::SuspectedPkLeak);
}

TEST(Agent, ActivationOutsideWindowIsAnomalous) {
  Fleet f(10);
  f.provision(0);
  f.now = 1720000000;
  f.provision(1);
  auto report = f.agent.anomaly_scan(kDefaultPo);
  EXPECT_EQ(report.out_of_window, 1);
  EXPECT_EQ(report.verdict, AnomalyVerdict::SuspectedPkLeak);
}

TEST(Agent, ReplayedRequestIsRejected) {
  Fleet f;
  auto dev = f.make(3);
  std::optional<protocol::Frame> first;
  struct Capture final : device::Transport {
    Agent& agent;
    std::optional<protocol::Frame>& out;
    Capture(Agent& a, std::optional<protocol::Frame>& o) : agent(a), out(o) {}
    std::optional<protocol::Frame> exchange(const protocol::Frame& r) override {
      if (!out) out = r;
      return agent.handle(r);
    }
  } cap(f.agent, first);
  device::device_request_ak(dev, cap);
  ASSERT_TRUE(first);
  auto before = f.registry.find(dev.identity.id)->ak;
  auto reply = f.agent.handle(*first);
  EXPECT_EQ(reply.type, protocol::MsgType::Error);
  EXPECT_EQ(f.registry.find(dev.identity.id)->ak, before);
  EXPECT_FALSE(f.registry.find(dev.identity.id)->pending_ak);
}

TEST(Agent, PendingKeyIsPromotedOnUse) {
  // The confirm is lost: the device commits the new key anyway and the
  // agent accepts it on the next request.
  struct LoseConfirm final : device::Transport {
    Agent& agent;
    explicit LoseConfirm(Agent& a) : agent(a) {}
    std::optional<protocol::Frame> exchange(const protocol::Frame& r) override {
      if (r.type == protocol::MsgType::AkConfirm) return std::nullopt;
      return agent.handle(r);
    }
  };
  Fleet f;
  auto dev = f.provision(4);
  LoseConfirm lose(f.agent);
  device::device_rotate_ak(dev, lose);
  EXPECT_EQ(dev.acks_missing, 1u);
  const auto* entry = f.registry.find(dev.identity.id);
  ASSERT_TRUE(entry->pending_ak);
  EXPECT_EQ(*entry->pending_ak, ak_of(dev));
  device::LocalTransport t(f.agent);
  device::device_rotate_ak(dev, t);
  EXPECT_EQ(*f.registry.find(dev.identity.id)->ak, ak_of(dev));
  EXPECT_GE(f.agent.stats().ak_promoted, 1u);
}

TEST(Agent, OneSessionPerDevice) {
  Fleet f;
  struct NoConfirm final : device::Transport {
    Agent& agent;
    explicit NoConfirm(Agent& a) : agent(a) {}
    std::optional<protocol::Frame> exchange(const protocol::Frame& r) override {
      if (r.type == protocol::MsgType::AkConfirm) return std::nullopt;
      return agent.handle(r);
    }
  } nc(f.agent);
  auto dev = f.make(9);
  for (int i = 0; i < 5; ++i) {
    auto copy = dev;
    copy.rng = crypto::Rng(1000 + i);
    device::device_request_ak(copy, nc);
  }
  EXPECT_EQ(f.agent.open_sessions(), 1u);
  constexpr int kDevices = 10000;
  for (int i = 100; i < 100 + kDevices; ++i) {
    auto d = f.make(i);
    device::device_request_ak(d, nc);
  }
  EXPECT_EQ(f.agent.open_sessions(), 1u + kDevices);
}

TEST(Agent, ConcurrentProvisioningIssuesOneKeyPerDevice) {
  Fleet f;
  constexpr int kThreads = 8, kPer = 25;
  std::vector<std::vector<device::DeviceState>> out(kThreads);
  std::vector<std::thread> threads;
  for (int t = 0; t < kThreads; ++t) {
    threads.emplace_back([&, t] {
      for (int i = 0; i < kPer; ++i) out[t].push_back(f.provision(t * kPer + i));
    });
  }
  for (auto& th : threads) th.join();
  std::set<crypto::SymmetricKey> keys;
  for (auto& v : out) {
    for (auto& d : v) {
      EXPECT_EQ(*f.registry.find(d.identity.id)->ak, ak_of(d));
      keys.insert(ak_of(d));
    }
  }
  EXPECT_EQ(keys.size(), std::size_t{kThreads * kPer});
  EXPECT_EQ(f.agent.stats().ak_issued, std::uint64_t{kThreads * kPer});
}

TEST(Registry, JournalReplayRestoresState) {
  TempDir dir("otakey_agent_journal");
  auto path = dir.path / "registry.jsonl";
  std::map<protocol::DeviceId, crypto::SymmetricKey> expect;
  {
    Fleet f(1000, path);
    for (int i = 0; i < 4; ++i) {
      auto dev = f.provision(i);
      if (i == 2) {
        device::LocalTransport t(f.agent);
        device::device_rotate_ak(dev, t);
      }
      expect[dev.identity.id] = ak_of(dev);
    }
  }
  Registry again(path);
  again.load();
  ASSERT_EQ(again.entries().size(), 4u);
  for (auto& [id, key] : expect) {
    EXPECT_EQ(again.find(id)->status, EntryStatus::Active);
    EXPECT_EQ(*again.find(id)->ak, key);
  }
  again.compact();
  Registry compacted(path);
  compacted.load();
  for (auto& [id, key] : expect) EXPECT_EQ(*compacted.find(id)->ak, key);
}

TEST(Registry, TornTailIsDropped) {
  TempDir dir("otakey_agent_torn");
  auto path = dir.path / "registry.jsonl";
  {
    Fleet f(1000, path);
    f.provision(0);
  }
  { std::ofstream(path, std::ios::app) << "{\"ts\":17000,\"id_hex\":\"00"; }
  Registry r(path);
  ASSERT_NO_THROW(r.load());
  EXPECT_EQ(r.entries().size(), 1u);
  // New appends start on a fresh line.
  r.commit(JournalRecord{1, to_hex(device_id_for(5)), to_hex(kDefaultPo), event::kRevoked, std::nullopt});
  Registry r2(path);
  EXPECT_NO_THROW(r2.load());
}

TEST(Registry, CorruptMiddleLineIsFatal) {
  TempDir dir("otakey_agent_corrupt");
  auto path = dir.path / "registry.jsonl";
  {
    Fleet f(1000, path);
    f.provision(0);
    f.provision(1);
  }
  std::ifstream in(path);
  std::vector<std::string> lines;
  for (std::string l; std::getline(in, l);) lines.push_back(l);
  in.close();
  ASSERT_GE(lines.size(), 3u);
  lines[1] = "not json";
  std::ofstream outf(path, std::ios::trunc);
  for (auto& l : lines) outf << l << "\n";
  outf.close();
  Registry r(path);
  try {
    r.load();
    FAIL() << "corrupt journal loaded";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::CorruptRegistry);
  }
}

TEST(Registry, JournalLineRoundTrip) {
  JournalRecord rec{42, to_hex(device_id_for(1)), to_hex(kDefaultPo), event::kAkPending,
                    crypto::generate_key(1).hex()};
  EXPECT_EQ(JournalRecord::from_json_line(rec.to_json_line()), rec);
  EXPECT_THROW(JournalRecord::from_json_line("{}"), Error);
}

TEST(Registry, PoFileRoundTrip) {
  TempDir dir("otakey_agent_pofile");
  std::vector<ProductOrderRecord> pos{{kDefaultPo, crypto::generate_key(3), 10, 1, 2, false}};
  save_po_file(dir.path / "po.json", pos);
  auto back = load_po_file(dir.path / "po.json");
  ASSERT_EQ(back.size(), 1u);
  EXPECT_EQ(back[0].pk, pos[0].pk);
  EXPECT_EQ(back[0].expected_count, 10);
}
