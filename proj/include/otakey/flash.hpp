#pragma once

// Emulated STM32F4-style internal flash holding the device key areas.
//
//   0x08000000  vector table            2 KiB
//   0x08000800  area A / agent key      2 KiB
//   0x08001000  area A / cloud key     16 KiB
//   0x08005000  area B (redundancy)    up to 0x08009D00
//   0x08009D00  feature firmware       remainder
//
// Area B mirrors A's split: a 2 KiB agent-family slot at 0x08005000 and a
// 16 KiB cloud slot at 0x08005800. Each slot holds at most one record.

#include <cstdint>
#include <array>
#include <exception>
#include <filesystem>
#include <optional>
#include <vector>
#include <string>

#include "otakey/bytes.hpp"
#include "otakey/crypto.hpp"

namespace otakey::flash {

inline constexpr std::uint32_t kBaseAddress = 0x08000000;
inline constexpr std::uint32_t kPageSize = 0x800;
inline constexpr std::uint32_t kProgramWidth = 4;
inline constexpr std::size_t kDefaultFlashSize = 64 * 1024;
inline constexpr std::uint8_t kErased = 0xFF;

struct Region {
  std::uint32_t begin;
  std::uint32_t end;  // exclusive

  constexpr std::uint32_t size() const { return end - begin; }
  constexpr bool contains(std::uint32_t addr) const { return addr >= begin && addr < end; }
};

namespace layout {
inline constexpr Region kVectorTable{0x08000000, 0x08000800};
inline constexpr Region kAreaAAgent{0x08000800, 0x08001000};
inline constexpr Region kAreaACloud{0x08001000, 0x08005000};
inline constexpr Region kAreaB{0x08005000, 0x08009D00};
inline constexpr Region kAreaBAgent{0x08005000, 0x08005800};
inline constexpr Region kAreaBCloud{0x08005800, 0x08009800};
inline constexpr std::uint32_t kFeatureFirmwareStart = 0x08009D00;
}  // namespace layout

// Thrown by the mutating operation at which an armed power cut fires.
struct PowerCut : std::exception {
  const char* what() const noexcept override { return "power cut"; }
};

class FlashImage {
 public:
  explicit FlashImage(std::size_t size = kDefaultFlashSize);

  std::uint32_t base_address() const { return kBaseAddress; }
  std::size_t size() const { return bytes_.size(); }
  std::uint32_t end_address() const { return kBaseAddress + static_cast<std::uint32_t>(bytes_.size()); }

  ByteView read(std::uint32_t addr, std::size_t len) const;
  bool is_erased(std::uint32_t addr, std::size_t len) const;

  // Programs data word by word. Every target byte must read 0xFF.
  void program(std::uint32_t addr, ByteView data);
  void erase_page(std::uint32_t page_addr);
  void erase_region(Region region);

  // Counts word programs and page erases since construction.
  std::uint64_t op_count() const { return ops_; }

  enum class OpKind : std::uint8_t { Program, Erase };
  // While tracing, the kind of every applied op is appended, indexed from
  // the op count at which tracing was enabled.
  void set_tracing(bool on) { tracing_ = on; trace_.clear(); }
  const std::vector<OpKind>& op_trace() const { return trace_; }

  // The op with index `op_index` is applied only up to `tear_offset` bytes,
  // then PowerCut is thrown; later mutations are dropped until power_on().
  void arm_power_cut(std::uint64_t op_index, std::size_t tear_offset);
  bool powered_off() const { return powered_off_; }
  // Immediate power loss outside any flash operation.
  void power_off() { powered_off_ = true; }
  // Reboot: clears the cut and forgets volatile bookkeeping.
  void power_on();

  const Bytes& raw() const { return bytes_; }
  static FlashImage from_raw(ByteView raw);
  void save(const std::filesystem::path& path) const;
  static FlashImage load(const std::filesystem::path& path);

  // Volatile marker for an agent-family write that has not been committed.
  bool agent_write_open() const { return agent_write_open_; }
  void set_agent_write_open(bool open) { agent_write_open_ = open; }

 private:
  std::size_t offset_of(std::uint32_t addr, std::size_t len) const;
  enum class OpGate { Apply, Drop, Tear };
  OpGate next_op(OpKind kind);
  [[noreturn]] void cut();

  Bytes bytes_;
  std::uint64_t ops_ = 0;
  bool tracing_ = false;
  std::vector<OpKind> trace_;
  std::optional<std::uint64_t> cut_at_;
  std::size_t tear_offset_ = 0;
  bool powered_off_ = false;
  bool agent_write_open_ = false;
};

FlashImage inject_power_cut(FlashImage image, std::uint64_t op_index, std::size_t tear_offset = 0);

enum class KeyKind : std::uint8_t { ProductKey = 1, AgentKey = 2, CloudKey = 3 };
std::string_view to_string(KeyKind kind);

enum class Slot : std::uint8_t { AAgent, BAgent, ACloud, BCloud };
Region region_of(Slot slot);
std::string_view to_string(Slot slot);

inline constexpr std::array<std::uint8_t, 4> kRecordMagic{'O', 'T', 'A', 'K'};
inline constexpr std::size_t kMaxPayload = 512;

struct KeySlotRecord {
  std::uint32_t seq = 0;
  KeyKind kind = KeyKind::AgentKey;
  crypto::SymmetricKey key;
  Bytes payload;

  // magic(4) seq(u32le) kind(1) key(16) payload_len(u16le) payload crc32(u32le)
  Bytes encode() const;
  // nullopt unless magic, length and CRC all check.
  static std::optional<KeySlotRecord> parse(ByteView slot_bytes);
  bool operator==(const KeySlotRecord&) const = default;
};

struct LocatedRecord {
  Slot slot;
  KeySlotRecord record;
};

struct BootScan {
  std::optional<LocatedRecord> product;
  std::optional<LocatedRecord> agent;
  std::optional<LocatedRecord> cloud;

  const std::optional<LocatedRecord>& of(KeyKind kind) const;
  // Key the device presents to the agent: its agent key, else the product key.
  std::optional<crypto::SymmetricKey> agent_channel_key() const;
};

// Non-throwing scan of every slot.
BootScan scan_slots(const FlashImage& image);
// As scan_slots, but throws Error(Unprovisioned) when neither a product nor
// an agent key is present.
BootScan boot_scan(const FlashImage& image);

FlashImage first_stage_burn(FlashImage image, const crypto::SymmetricKey& pk, ByteView firmware);

struct PendingWrite {
  KeyKind kind;
  Slot target;
  std::uint32_t seq;
  std::optional<Slot> previous;
};

PendingWrite begin_key_write(FlashImage& image, KeyKind kind, const crypto::SymmetricKey& key,
                             ByteView payload);
void commit_key(FlashImage& image, const PendingWrite& pending);
void erase_product_key(FlashImage& image);

// Erases the slot the next write of `kind` would target if it is not blank.
// Returns true if an erase happened.
bool erase_stale_slot(FlashImage& image, KeyKind kind);

std::string hex_dump(const FlashImage& image, Region region);

}  // namespace otakey::flash
