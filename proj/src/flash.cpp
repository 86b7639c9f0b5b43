#include "otakey/flash.hpp"

#include <zlib.h>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "otakey/error.hpp"

namespace otakey::flash {

FlashImage::FlashImage(std::size_t size) : bytes_(size, kErased) {
  if (size < layout::kFeatureFirmwareStart - kBaseAddress || size % kPageSize != 0) {
    throw Error(ErrorCode::SizeError, "flash size must cover the key areas and be page aligned");
  }
}

std::size_t FlashImage::offset_of(std::uint32_t addr, std::size_t len) const {
  if (addr < kBaseAddress || addr - kBaseAddress + len > bytes_.size()) {
    throw Error(ErrorCode::OutOfRange, "flash access outside the image");
  }
  return addr - kBaseAddress;
}

ByteView FlashImage::read(std::uint32_t addr, std::size_t len) const {
  return ByteView(bytes_).subspan(offset_of(addr, len), len);
}

bool FlashImage::is_erased(std::uint32_t addr, std::size_t len) const {
  auto v = read(addr, len);
  return std::all_of(v.begin(), v.end(), [](std::uint8_t b) { return b == kErased; });
}

FlashImage::OpGate FlashImage::next_op(OpKind kind) {
  if (powered_off_) return OpGate::Drop;
  std::uint64_t index = ops_++;
  if (tracing_) trace_.push_back(kind);
  if (cut_at_ && index == *cut_at_) return OpGate::Tear;
  return OpGate::Apply;
}

void FlashImage::cut() {
  powered_off_ = true;
  throw PowerCut{};
}

void FlashImage::program(std::uint32_t addr, ByteView data) {
  std::size_t off = offset_of(addr, data.size());
  if (!is_erased(addr, data.size())) {
    throw Error(ErrorCode::WriteToNonErased, "program target is not erased");
  }
  for (std::size_t i = 0; i < data.size(); i += kProgramWidth) {
    std::size_t n = std::min<std::size_t>(kProgramWidth, data.size() - i);
    switch (next_op(OpKind::Program)) {
      case OpGate::Drop:
        return;
      case OpGate::Tear:
        std::copy_n(data.begin() + i, std::min(n, tear_offset_), bytes_.begin() + off + i);
        cut();
      case OpGate::Apply:
        std::copy_n(data.begin() + i, n, bytes_.begin() + off + i);
        break;
    }
  }
}

void FlashImage::erase_page(std::uint32_t page_addr) {
  if ((page_addr - kBaseAddress) % kPageSize != 0) {
    throw Error(ErrorCode::OutOfRange, "erase address is not page aligned");
  }
  std::size_t off = offset_of(page_addr, kPageSize);
  switch (next_op(OpKind::Erase)) {
    case OpGate::Drop:
      return;
    case OpGate::Tear:
      std::fill_n(bytes_.begin() + off, std::min<std::size_t>(kPageSize, tear_offset_), kErased);
      cut();
    case OpGate::Apply:
      std::fill_n(bytes_.begin() + off, kPageSize, kErased);
      break;
  }
}

void FlashImage::erase_region(Region region) {
  if ((region.begin - kBaseAddress) % kPageSize != 0 || region.size() % kPageSize != 0) {
    throw Error(ErrorCode::OutOfRange, "erase region is not page aligned");
  }
  for (std::uint32_t a = region.begin; a < region.end; a += kPageSize) erase_page(a);
}

void FlashImage::arm_power_cut(std::uint64_t op_index, std::size_t tear_offset) {
  cut_at_ = op_index;
  tear_offset_ = tear_offset;
}

void FlashImage::power_on() {
  cut_at_.reset();
  powered_off_ = false;
  agent_write_open_ = false;
}

FlashImage FlashImage::from_raw(ByteView raw) {
  FlashImage img(raw.size());
  std::copy(raw.begin(), raw.end(), img.bytes_.begin());
  return img;
}

void FlashImage::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::Io, "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes_.data()), static_cast<std::streamsize>(bytes_.size()));
  if (!out) throw Error(ErrorCode::Io, "short write to " + path.string());
}

FlashImage FlashImage::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
  Bytes raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return from_raw(raw);
}

FlashImage inject_power_cut(FlashImage image, std::uint64_t op_index, std::size_t tear_offset) {
  image.arm_power_cut(op_index, tear_offset);
  return image;
}

std::string_view to_string(KeyKind kind) {
  switch (kind) {
    case KeyKind::ProductKey: return "ProductKey";
    case KeyKind::AgentKey: return "AgentKey";
    case KeyKind::CloudKey: return "CloudKey";
  }
  return "?";
}

Region region_of(Slot slot) {
  switch (slot) {
    case Slot::AAgent: return layout::kAreaAAgent;
    case Slot::BAgent: return layout::kAreaBAgent;
    case Slot::ACloud: return layout::kAreaACloud;
    case Slot::BCloud: return layout::kAreaBCloud;
  }
  throw Error(ErrorCode::OutOfRange, "bad slot");
}

std::string_view to_string(Slot slot) {
  switch (slot) {
    case Slot::AAgent: return "A.agent";
    case Slot::BAgent: return "B.agent";
    case Slot::ACloud: return "A.cloud";
    case Slot::BCloud: return "B.cloud";
  }
  return "?";
}

namespace {

std::uint32_t crc_of(ByteView data) {
  return static_cast<std::uint32_t>(::crc32(0L, data.data(), static_cast<uInt>(data.size())));
}

bool is_agent_family(KeyKind k) { return k == KeyKind::ProductKey || k == KeyKind::AgentKey; }
bool is_agent_slot(Slot s) { return s == Slot::AAgent || s == Slot::BAgent; }

std::optional<LocatedRecord> read_slot(const FlashImage& image, Slot slot) {
  auto region = region_of(slot);
  auto rec = KeySlotRecord::parse(image.read(region.begin, region.size()));
  if (!rec) return std::nullopt;
  if (is_agent_slot(slot) != is_agent_family(rec->kind)) return std::nullopt;
  if (rec->kind == KeyKind::ProductKey && slot != Slot::BAgent) return std::nullopt;
  return LocatedRecord{slot, std::move(*rec)};
}

void keep_newer(std::optional<LocatedRecord>& best, std::optional<LocatedRecord> candidate) {
  if (!candidate) return;
  if (!best || candidate->record.seq > best->record.seq) best = std::move(candidate);
}

Slot other(Slot s) {
  switch (s) {
    case Slot::AAgent: return Slot::BAgent;
    case Slot::BAgent: return Slot::AAgent;
    case Slot::ACloud: return Slot::BCloud;
    case Slot::BCloud: return Slot::ACloud;
  }
  return s;
}

struct WritePlan {
  Slot target;
  std::uint32_t seq;
  std::optional<Slot> previous;
};

WritePlan plan_write(const BootScan& scan, KeyKind kind) {
  if (kind == KeyKind::ProductKey) {
    throw Error(ErrorCode::OrderingViolation, "product keys are only written by the first-stage burn");
  }
  const auto& active = scan.of(kind);
  if (active) return WritePlan{other(active->slot), active->record.seq + 1, active->slot};
  if (kind == KeyKind::AgentKey) {
    std::uint32_t seq = scan.product ? scan.product->record.seq + 1 : 1;
    return WritePlan{Slot::AAgent, seq, std::nullopt};
  }
  return WritePlan{Slot::ACloud, 1, std::nullopt};
}

}  // namespace

Bytes KeySlotRecord::encode() const {
  if (payload.size() > kMaxPayload) throw Error(ErrorCode::SizeError, "record payload exceeds 512 bytes");
  ByteWriter w;
  w.raw(kRecordMagic)
      .u32le(seq)
      .u8(static_cast<std::uint8_t>(kind))
      .raw(key.bytes)
      .u16le(static_cast<std::uint16_t>(payload.size()))
      .raw(payload);
  auto crc = crc_of(w.bytes());
  w.u32le(crc);
  return std::move(w).bytes();
}

std::optional<KeySlotRecord> KeySlotRecord::parse(ByteView slot_bytes) {
  try {
    ByteReader r(slot_bytes);
    auto magic = r.fixed<4>();
    if (magic != kRecordMagic) return std::nullopt;
    KeySlotRecord rec;
    rec.seq = r.u32le();
    auto kind = r.u8();
    if (kind < 1 || kind > 3) return std::nullopt;
    rec.kind = static_cast<KeyKind>(kind);
    rec.key.bytes = r.fixed<crypto::kKeySize>();
    auto len = r.u16le();
    if (len > kMaxPayload) return std::nullopt;
    auto payload = r.take(len);
    rec.payload.assign(payload.begin(), payload.end());
    std::size_t covered = slot_bytes.size() - r.remaining();
    auto crc = r.u32le();
    if (crc != crc_of(slot_bytes.first(covered))) return std::nullopt;
    return rec;
  } catch (const Error&) {
    return std::nullopt;
  }
}

const std::optional<LocatedRecord>& BootScan::of(KeyKind kind) const {
  switch (kind) {
    case KeyKind::ProductKey: return product;
    case KeyKind::AgentKey: return agent;
    case KeyKind::CloudKey: return cloud;
  }
  return product;
}

std::optional<crypto::SymmetricKey> BootScan::agent_channel_key() const {
  if (agent) return agent->record.key;
  if (product) return product->record.key;
  return std::nullopt;
}

BootScan scan_slots(const FlashImage& image) {
  BootScan scan;
  for (Slot s : {Slot::AAgent, Slot::BAgent}) {
    auto rec = read_slot(image, s);
    if (!rec) continue;
    if (rec->record.kind == KeyKind::ProductKey) {
      scan.product = std::move(rec);
    } else {
      keep_newer(scan.agent, std::move(rec));
    }
  }
  for (Slot s : {Slot::ACloud, Slot::BCloud}) keep_newer(scan.cloud, read_slot(image, s));
  return scan;
}

BootScan boot_scan(const FlashImage& image) {
  auto scan = scan_slots(image);
  if (!scan.product && !scan.agent) throw Error(ErrorCode::Unprovisioned, "no product or agent key");
  return scan;
}

FlashImage first_stage_burn(FlashImage image, const crypto::SymmetricKey& pk, ByteView firmware) {
  std::size_t capacity = image.end_address() - layout::kFeatureFirmwareStart;
  if (firmware.size() > capacity) {
    throw Error(ErrorCode::SizeError, "firmware of " + std::to_string(firmware.size()) +
                                          " bytes exceeds feature region of " + std::to_string(capacity));
  }
  KeySlotRecord pk_record{0, KeyKind::ProductKey, pk, {}};
  image.program(layout::kAreaBAgent.begin, pk_record.encode());
  if (!firmware.empty()) image.program(layout::kFeatureFirmwareStart, firmware);
  return image;
}

PendingWrite begin_key_write(FlashImage& image, KeyKind kind, const crypto::SymmetricKey& key,
                             ByteView payload) {
  if (payload.size() > kMaxPayload) throw Error(ErrorCode::SizeError, "record payload exceeds 512 bytes");
  auto scan = scan_slots(image);
  if (!scan.product && !scan.agent && kind != KeyKind::AgentKey) {
    throw Error(ErrorCode::Unprovisioned, "no active key to update from");
  }
  auto plan = plan_write(scan, kind);
  auto region = region_of(plan.target);
  KeySlotRecord rec{plan.seq, kind, key, Bytes(payload.begin(), payload.end())};
  auto encoded = rec.encode();
  if (!image.is_erased(region.begin, encoded.size())) {
    throw Error(ErrorCode::StaleSlotOccupied, std::string(to_string(plan.target)) + " holds stale data");
  }
  if (kind == KeyKind::AgentKey) image.set_agent_write_open(true);
  image.program(region.begin, encoded);
  return PendingWrite{kind, plan.target, plan.seq, plan.previous};
}

void commit_key(FlashImage& image, const PendingWrite& pending) {
  auto region = region_of(pending.target);
  auto rec = KeySlotRecord::parse(image.read(region.begin, region.size()));
  if (!rec || rec->seq != pending.seq || rec->kind != pending.kind) {
    throw Error(ErrorCode::CommitRefused, "pending record is not intact");
  }
  if (pending.previous) image.erase_region(region_of(*pending.previous));
  if (pending.kind == KeyKind::AgentKey) image.set_agent_write_open(false);
}

void erase_product_key(FlashImage& image) {
  auto scan = scan_slots(image);
  if (!scan.agent || image.agent_write_open()) {
    throw Error(ErrorCode::OrderingViolation, "product key erase requires a committed agent key");
  }
  if (scan.product) image.erase_region(layout::kAreaBAgent);
}

bool erase_stale_slot(FlashImage& image, KeyKind kind) {
  auto plan = plan_write(scan_slots(image), kind);
  auto region = region_of(plan.target);
  if (image.is_erased(region.begin, region.size())) return false;
  image.erase_region(region);
  return true;
}

std::string hex_dump(const FlashImage& image, Region region) {
  std::ostringstream out;
  bool skipping = false;
  char line[128];
  for (std::uint32_t addr = region.begin; addr < region.end; addr += 16) {
    std::size_t n = std::min<std::size_t>(16, region.end - addr);
    auto row = image.read(addr, n);
    bool blank = std::all_of(row.begin(), row.end(), [](std::uint8_t b) { return b == kErased; });
    if (blank && addr != region.begin && addr + n < region.end) {
      if (!skipping) out << "*\n";
      skipping = true;
      continue;
    }
    skipping = false;
    int pos = std::snprintf(line, sizeof line, "%08x ", addr);
    for (std::size_t i = 0; i < 16; ++i) {
      pos += i < n ? std::snprintf(line + pos, sizeof line - pos, " %02x", row[i])
                   : std::snprintf(line + pos, sizeof line - pos, "   ");
    }
    out << line << "  |";
    for (auto b : row) out << static_cast<char>(b >= 0x20 && b < 0x7f ? b : '.');
    out << "|\n";
  }
  return out.str();
}

}  // namespace otakey::flash
