#include <gtest/gtest.h>

#include <filesystem>

#include "otakey/error.hpp"
#include "otakey/flash.hpp"

using namespace otakey;
using namespace otakey::flash;
using crypto::SymmetricKey;

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

FlashImage burned(const SymmetricKey& pk) { return first_stage_burn(FlashImage{}, pk, {}); }

// Stage two by hand: first agent key committed, product key erased.
FlashImage provisioned(const SymmetricKey& pk, const SymmetricKey& ak) {
  auto img = burned(pk);
  auto w = begin_key_write(img, KeyKind::AgentKey, ak, {});
  commit_key(img, w);
  erase_product_key(img);
  return img;
}

}  // namespace

TEST(FlashLayout, RegionsMatchTheKeyAreaMap) {
  EXPECT_EQ(region_of(Slot::AAgent).begin, 0x08000800u);
  EXPECT_EQ(region_of(Slot::AAgent).end, 0x08001000u);
  EXPECT_EQ(region_of(Slot::ACloud).begin, 0x08001000u);
  EXPECT_EQ(region_of(Slot::ACloud).end, 0x08005000u);
  EXPECT_EQ(region_of(Slot::BAgent).begin, 0x08005000u);
  EXPECT_EQ(region_of(Slot::BCloud).end, 0x08009800u);
  EXPECT_EQ(layout::kFeatureFirmwareStart, 0x08009D00u);
  // The cloud slot holds 16 KiB, the agent slot 2 KiB.
  EXPECT_EQ(region_of(Slot::ACloud).size(), 16u * 1024);
  EXPECT_EQ(region_of(Slot::BAgent).size(), kPageSize);
}

TEST(FlashImage, ProgramRequiresErasedBytes) {
  FlashImage img;
  Bytes word{1, 2, 3, 4};
  img.program(0x08002000, word);
  EXPECT_EQ(code_of([&] { img.program(0x08002000, word); }), ErrorCode::WriteToNonErased);
  img.erase_page(0x08002000);
  EXPECT_TRUE(img.is_erased(0x08002000, kPageSize));
  EXPECT_EQ(code_of([&] { img.erase_page(0x08002001); }), ErrorCode::OutOfRange);
  EXPECT_EQ(code_of([&] { img.read(img.end_address() - 2, 4); }), ErrorCode::OutOfRange);
}

TEST(FlashImage, PowerCutTearsAndThenDropsOps) {
  FlashImage img;
  Bytes data(12, 0xAB);
  img.arm_power_cut(1, 2);  // second word, two bytes land
  EXPECT_THROW(img.program(0x08002000, data), PowerCut);
  EXPECT_TRUE(img.powered_off());
  auto v = img.read(0x08002000, 12);
  EXPECT_EQ(v[3], 0xAB);
  EXPECT_EQ(v[5], 0xAB);
  EXPECT_EQ(v[6], 0xFF);
  img.erase_page(0x08002000);  // dropped while unpowered
  EXPECT_EQ(img.read(0x08002000, 1)[0], 0xAB);
  img.power_on();
  img.erase_page(0x08002000);
  EXPECT_TRUE(img.is_erased(0x08002000, 12));
}

TEST(FlashImage, SaveLoadRoundTrip) {
  auto pk = crypto::generate_key(1);
  auto img = burned(pk);
  auto path = std::filesystem::temp_directory_path() / "otakey_flash_roundtrip.bin";
  img.save(path);
  auto back = FlashImage::load(path);
  EXPECT_EQ(back.raw(), img.raw());
  std::filesystem::remove(path);
}

TEST(KeySlotRecord, EncodeParseAndCrc) {
  KeySlotRecord r{7, KeyKind::CloudKey, crypto::generate_key(3), to_bytes("mqtts://example:8883")};
  auto wire = r.encode();
  EXPECT_EQ(wire.size(), 4 + 4 + 1 + 16 + 2 + r.payload.size() + 4);
  auto back = KeySlotRecord::parse(wire);
  ASSERT_TRUE(back);
  EXPECT_EQ(*back, r);
  for (std::size_t i = 0; i < wire.size(); ++i) {
    auto copy = wire;
    copy[i] ^= 0x10;
    auto p = KeySlotRecord::parse(copy);
    EXPECT_TRUE(!p || !(*p == r)) << "byte " << i;
  }
  KeySlotRecord big{1, KeyKind::CloudKey, {}, Bytes(kMaxPayload + 1)};
  FlashImage img = burned(crypto::generate_key(4));
  EXPECT_EQ(code_of([&] { begin_key_write(img, KeyKind::CloudKey, {}, big.payload); }), ErrorCode::SizeError);
}

TEST(FirstStageBurn, ProductKeyIsTheOnlyKey) {
  auto pk = crypto::generate_key(5);
  auto img = burned(pk);
  auto scan = boot_scan(img);
  ASSERT_TRUE(scan.product);
  EXPECT_EQ(scan.product->record.key, pk);
  EXPECT_EQ(scan.product->slot, Slot::BAgent);
  EXPECT_EQ(scan.product->record.seq, 0u);
  EXPECT_FALSE(scan.agent);
  EXPECT_FALSE(scan.cloud);
  EXPECT_EQ(scan.agent_channel_key(), pk);
}

TEST(FirstStageBurn, TwiceWithoutEraseFails) {
  auto pk = crypto::generate_key(6);
  auto img = burned(pk);
  EXPECT_EQ(code_of([&] { first_stage_burn(img, pk, {}); }), ErrorCode::WriteToNonErased);
}

TEST(FirstStageBurn, FirmwareBounds) {
  auto pk = crypto::generate_key(7);
  Bytes fw(1000, 0x5A);
  auto img = first_stage_burn(FlashImage{}, pk, fw);
  EXPECT_EQ(img.read(layout::kFeatureFirmwareStart, 1)[0], 0x5A);
  Bytes too_big(FlashImage{}.end_address() - layout::kFeatureFirmwareStart + 1);
  EXPECT_EQ(code_of([&] { first_stage_burn(FlashImage{}, pk, too_big); }), ErrorCode::SizeError);
}

TEST(FlashBlank, UnprovisionedImage) {
  FlashImage img;
  EXPECT_EQ(code_of([&] { boot_scan(img); }), ErrorCode::Unprovisioned);
}

TEST(KeyWrite, FirstAgentKeyGoesToAreaA) {
  auto pk = crypto::generate_key(8), ak = crypto::generate_key(9);
  auto img = burned(pk);
  auto w = begin_key_write(img, KeyKind::AgentKey, ak, {});
  EXPECT_EQ(w.target, Slot::AAgent);
  EXPECT_EQ(w.seq, 1u);
  commit_key(img, w);
  auto scan = boot_scan(img);
  ASSERT_TRUE(scan.agent);
  EXPECT_EQ(scan.agent->record.key, ak);
  EXPECT_TRUE(scan.product);  // until stage two erases it
  erase_product_key(img);
  scan = boot_scan(img);
  EXPECT_FALSE(scan.product);
  EXPECT_EQ(scan.agent_channel_key(), ak);
}

TEST(KeyWrite, RotationAlternatesSlotsAndBumpsSeq) {
  auto img = provisioned(crypto::generate_key(10), crypto::generate_key(11));
  auto w = begin_key_write(img, KeyKind::AgentKey, crypto::generate_key(12), {});
  EXPECT_EQ(w.target, Slot::BAgent);
  EXPECT_EQ(w.seq, 2u);
  commit_key(img, w);
  EXPECT_TRUE(img.is_erased(layout::kAreaAAgent.begin, layout::kAreaAAgent.size()));
  auto w2 = begin_key_write(img, KeyKind::AgentKey, crypto::generate_key(13), {});
  EXPECT_EQ(w2.target, Slot::AAgent);
  EXPECT_EQ(w2.seq, 3u);
}

TEST(KeyWrite, StaleSlotMustBeErasedFirst) {
  auto img = provisioned(crypto::generate_key(14), crypto::generate_key(15));
  begin_key_write(img, KeyKind::AgentKey, crypto::generate_key(16), {});
  // A second write without committing the first targets a non-blank slot.
  EXPECT_EQ(code_of([&] { begin_key_write(img, KeyKind::AgentKey, crypto::generate_key(17), {}); }),
            ErrorCode::StaleSlotOccupied);
  EXPECT_TRUE(erase_stale_slot(img, KeyKind::AgentKey));
  EXPECT_NO_THROW(begin_key_write(img, KeyKind::AgentKey, crypto::generate_key(17), {}));
}

TEST(KeyWrite, CommitRefusesAnUnverifiedRecord) {
  auto img = provisioned(crypto::generate_key(18), crypto::generate_key(19));
  auto w = begin_key_write(img, KeyKind::AgentKey, crypto::generate_key(20), {});
  img.erase_region(region_of(w.target));
  EXPECT_EQ(code_of([&] { commit_key(img, w); }), ErrorCode::CommitRefused);
  // The old key survives the refused commit.
  EXPECT_EQ(boot_scan(img).agent->record.key, crypto::generate_key(19));
}

TEST(KeyWrite, ProductKeyEraseOrdering) {
  auto pk = crypto::generate_key(21);
  auto img = burned(pk);
  EXPECT_EQ(code_of([&] { erase_product_key(img); }), ErrorCode::OrderingViolation);
  begin_key_write(img, KeyKind::AgentKey, crypto::generate_key(22), {});
  // Written but not committed.
  EXPECT_EQ(code_of([&] { erase_product_key(img); }), ErrorCode::OrderingViolation);
}

TEST(KeyWrite, CloudKeyNeedsAnActiveKey) {
  FlashImage img;
  EXPECT_EQ(code_of([&] { begin_key_write(img, KeyKind::CloudKey, crypto::generate_key(23), {}); }),
            ErrorCode::Unprovisioned);
}

// Cut a rotation at every op and tear offset: boot_scan must return exactly
// the old record or exactly the new one.
TEST(KeyWrite, RotationIsAtomicUnderEveryCut) {
  auto old_ak = crypto::generate_key(24), new_ak = crypto::generate_key(25);
  auto base = provisioned(crypto::generate_key(26), old_ak);
  auto probe = base;
  std::uint64_t start = probe.op_count();
  commit_key(probe, begin_key_write(probe, KeyKind::AgentKey, new_ak, {}));
  std::uint64_t ops = probe.op_count() - start;
  ASSERT_GT(ops, 5u);

  std::size_t old_seen = 0, new_seen = 0;
  for (std::uint64_t op = 0; op < ops; ++op) {
    for (std::size_t tear : {0, 1, 2, 3, 1024}) {
      auto img = base;
      img.arm_power_cut(img.op_count() + op, tear);
      try {
        commit_key(img, begin_key_write(img, KeyKind::AgentKey, new_ak, {}));
      } catch (const PowerCut&) {
      }
      img.power_on();
      auto scan = boot_scan(img);
      ASSERT_TRUE(scan.agent) << "op " << op << " tear " << tear;
      if (scan.agent->record.key == old_ak) {
        EXPECT_EQ(scan.agent->record.seq, 1u);
        ++old_seen;
      } else {
        EXPECT_EQ(scan.agent->record.key, new_ak);
        EXPECT_EQ(scan.agent->record.seq, 2u);
        ++new_seen;
      }
    }
  }
  // A cut mid-write keeps the old key; a cut during the old slot's erase
  // already sees the new one.
  EXPECT_GT(old_seen, 0u);
  EXPECT_GT(new_seen, 0u);
}
