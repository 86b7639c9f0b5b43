#pragma once

// Agent-side device registry persisted as an append-only JSON-Lines journal
// plus an optional compaction snapshot. Every mutation is journaled before
// it is applied, so nothing acknowledged to a device can be lost.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "otakey/crypto.hpp"
#include "otakey/messages.hpp"

namespace otakey::agent {

using protocol::DeviceId;
using protocol::ProductOrder;

enum class EntryStatus { Unseen, PendingAk, Active, Revoked };
std::string_view to_string(EntryStatus status);

struct AuditEvent {
  std::int64_t ts = 0;
  std::string event;
};

struct RegistryEntry {
  DeviceId id{};
  ProductOrder po{};
  EntryStatus status = EntryStatus::Unseen;
  std::optional<crypto::SymmetricKey> ak;
  // Issued but not yet confirmed; accepted alongside `ak` until superseded.
  std::optional<crypto::SymmetricKey> pending_ak;
  std::uint32_t cloud_key_seq = 0;
  std::optional<std::int64_t> activated_at;
  std::vector<AuditEvent> audit;
};

struct ProductOrderRecord {
  ProductOrder po{};
  crypto::SymmetricKey pk;
  std::int64_t expected_count = 0;
  std::int64_t window_start = 0;
  std::int64_t window_end = 0;
  bool revoked = false;
};

// PO config: JSON array of {po_hex, pk_hex, expected_count, window_start, window_end}.
std::vector<ProductOrderRecord> load_po_file(const std::filesystem::path& path);
void save_po_file(const std::filesystem::path& path, const std::vector<ProductOrderRecord>& pos);

struct JournalRecord {
  std::int64_t ts = 0;
  std::string id_hex;
  std::string po_hex;
  std::string event;
  std::optional<std::string> key_hex;

  std::string to_json_line() const;
  static JournalRecord from_json_line(const std::string& line);
  bool operator==(const JournalRecord&) const = default;
};

namespace event {
inline constexpr const char* kAkPending = "ak_pending";
inline constexpr const char* kAkActive = "ak_active";
inline constexpr const char* kCkRegistered = "ck_registered";
inline constexpr const char* kCkActivated = "ck_activated";
inline constexpr const char* kRevoked = "revoked";
inline constexpr const char* kPoRevoked = "po_revoked";
inline constexpr const char* kReset = "reset";
}  // namespace event

// Thrown by a crash hook to emulate the agent process dying mid-commit.
struct SimulatedCrash : std::exception {
  const char* what() const noexcept override { return "simulated agent crash"; }
};

enum class CrashPoint { BeforeAppend, TornAppend, AfterAppend };

class Registry {
 public:
  Registry() = default;  // in-memory only
  explicit Registry(std::filesystem::path journal_path);

  // Replays snapshot + journal. A torn final journal line is dropped; any
  // other unparsable line throws Error(CorruptRegistry).
  void load();
  void add_product_order(ProductOrderRecord po);

  // Journal-then-apply. Throws Error(Busy) if the journal cannot be written.
  void commit(const JournalRecord& record);

  // Rewrites the snapshot from current state and truncates the journal.
  void compact();

  const RegistryEntry* find(const DeviceId& id) const;
  const ProductOrderRecord* find_po(const ProductOrder& po) const;
  const std::map<DeviceId, RegistryEntry>& entries() const { return entries_; }
  const std::map<ProductOrder, ProductOrderRecord>& product_orders() const { return pos_; }

  std::size_t journal_records_written() const { return written_; }
  // Throws SimulatedCrash around the n-th append (counted from 1).
  void arm_crash(std::size_t at_append, CrashPoint point);

  std::filesystem::path snapshot_path() const;

 private:
  void apply(const JournalRecord& record);
  void open_journal();

  std::optional<std::filesystem::path> journal_path_;
  std::ofstream journal_;
  std::map<DeviceId, RegistryEntry> entries_;
  std::map<ProductOrder, ProductOrderRecord> pos_;
  std::size_t written_ = 0;
  std::optional<std::pair<std::size_t, CrashPoint>> crash_;
  std::vector<ProductOrder> revoked_pos_;
};

}  // namespace otakey::agent
