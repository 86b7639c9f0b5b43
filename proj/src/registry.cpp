#include "otakey/registry.hpp"

#include <algorithm>
#include <nlohmann/json.hpp>

#include "otakey/error.hpp"

namespace otakey::agent {

using nlohmann::json;

std::string_view to_string(EntryStatus status) {
  switch (status) {
    case EntryStatus::Unseen: return "Unseen";
    case EntryStatus::PendingAk: return "PendingAk";
    case EntryStatus::Active: return "Active";
    case EntryStatus::Revoked: return "Revoked";
  }
  return "?";
}

namespace {

EntryStatus status_from_string(const std::string& s) {
  if (s == "Unseen") return EntryStatus::Unseen;
  if (s == "PendingAk") return EntryStatus::PendingAk;
  if (s == "Active") return EntryStatus::Active;
  if (s == "Revoked") return EntryStatus::Revoked;
  throw Error(ErrorCode::CorruptRegistry, "unknown status " + s);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

}  // namespace

std::vector<ProductOrderRecord> load_po_file(const std::filesystem::path& path) {
  std::vector<ProductOrderRecord> out;
  try {
    auto doc = json::parse(read_file(path));
    if (!doc.is_array()) throw Error(ErrorCode::Config, "PO file must hold a JSON array");
    for (const auto& j : doc) {
      ProductOrderRecord po;
      po.po = array_from_hex<8>(j.at("po_hex").get<std::string>());
      po.pk = crypto::SymmetricKey::from_hex(j.at("pk_hex").get<std::string>());
      po.expected_count = j.at("expected_count").get<std::int64_t>();
      po.window_start = j.at("window_start").get<std::int64_t>();
      po.window_end = j.at("window_end").get<std::int64_t>();
      if (po.expected_count < 0) throw Error(ErrorCode::Config, "expected_count must be >= 0");
      out.push_back(po);
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::Config, std::string("PO file: ") + e.what());
  } catch (const Error& e) {
    if (e.code() == ErrorCode::Malformed) throw Error(ErrorCode::Config, e.what());
    throw;
  }
  return out;
}

void save_po_file(const std::filesystem::path& path, const std::vector<ProductOrderRecord>& pos) {
  json doc = json::array();
  for (const auto& po : pos) {
    doc.push_back({{"po_hex", to_hex(po.po)},
                   {"pk_hex", po.pk.hex()},
                   {"expected_count", po.expected_count},
                   {"window_start", po.window_start},
                   {"window_end", po.window_end}});
  }
  std::ofstream out(path, std::ios::trunc);
  out << doc.dump(2) << "\n";
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
}

std::string JournalRecord::to_json_line() const {
  json j{{"ts", ts}, {"id_hex", id_hex}, {"po_hex", po_hex}, {"event", event}};
  if (key_hex) j["key_hex"] = *key_hex;
  return j.dump();
}

JournalRecord JournalRecord::from_json_line(const std::string& line) {
  try {
    auto j = json::parse(line);
    JournalRecord r;
    r.ts = j.at("ts").get<std::int64_t>();
    r.id_hex = j.at("id_hex").get<std::string>();
    r.po_hex = j.at("po_hex").get<std::string>();
    r.event = j.at("event").get<std::string>();
    if (j.contains("key_hex")) r.key_hex = j.at("key_hex").get<std::string>();
    return r;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::CorruptRegistry, e.what());
  }
}

Registry::Registry(std::filesystem::path journal_path) : journal_path_(std::move(journal_path)) {}

std::filesystem::path Registry::snapshot_path() const {
  if (!journal_path_) return {};
  auto p = *journal_path_;
  p += ".snapshot";
  return p;
}

void Registry::add_product_order(ProductOrderRecord po) {
  if (std::find(revoked_pos_.begin(), revoked_pos_.end(), po.po) != revoked_pos_.end()) po.revoked = true;
  pos_[po.po] = po;
}

void Registry::load() {
  if (!journal_path_) return;
  entries_.clear();
  revoked_pos_.clear();

  auto snap = snapshot_path();
  if (std::filesystem::exists(snap)) {
    try {
      auto doc = json::parse(read_file(snap));
      for (const auto& j : doc.at("entries")) {
        RegistryEntry e;
        e.id = array_from_hex<12>(j.at("id_hex").get<std::string>());
        e.po = array_from_hex<8>(j.at("po_hex").get<std::string>());
        e.status = status_from_string(j.at("status").get<std::string>());
        if (j.contains("ak_hex")) e.ak = crypto::SymmetricKey::from_hex(j.at("ak_hex").get<std::string>());
        if (j.contains("pending_hex")) {
          e.pending_ak = crypto::SymmetricKey::from_hex(j.at("pending_hex").get<std::string>());
        }
        e.cloud_key_seq = j.at("cloud_key_seq").get<std::uint32_t>();
        if (j.contains("activated_at")) e.activated_at = j.at("activated_at").get<std::int64_t>();
        entries_[e.id] = std::move(e);
      }
      for (const auto& po : doc.at("revoked_pos")) revoked_pos_.push_back(array_from_hex<8>(po.get<std::string>()));
    } catch (const json::exception& e) {
      throw Error(ErrorCode::CorruptRegistry, std::string("snapshot: ") + e.what());
    } catch (const Error& e) {
      throw Error(ErrorCode::CorruptRegistry, std::string("snapshot: ") + e.what());
    }
  }
  for (auto& [po, rec] : pos_) {
    rec.revoked = std::find(revoked_pos_.begin(), revoked_pos_.end(), po) != revoked_pos_.end();
  }

  if (std::filesystem::exists(*journal_path_)) {
    auto text = read_file(*journal_path_);
    std::vector<std::string> lines;
    std::size_t start = 0;
    while (start < text.size()) {
      auto nl = text.find('\n', start);
      if (nl == std::string::npos) {
        lines.push_back(text.substr(start));
        break;
      }
      lines.push_back(text.substr(start, nl - start));
      start = nl + 1;
    }
    bool unterminated_tail = !text.empty() && text.back() != '\n';
    for (std::size_t i = 0; i < lines.size(); ++i) {
      if (lines[i].empty()) continue;
      bool last = i + 1 == lines.size();
      JournalRecord rec;
      try {
        rec = JournalRecord::from_json_line(lines[i]);
      } catch (const Error&) {
        if (last) break;  // torn tail from a crash mid-append
        throw Error(ErrorCode::CorruptRegistry, "journal line " + std::to_string(i + 1) + " is unparsable");
      }
      if (last && unterminated_tail) break;
      try {
        apply(rec);
      } catch (const Error& e) {
        throw Error(ErrorCode::CorruptRegistry, "journal line " + std::to_string(i + 1) + ": " + e.what());
      }
    }
    if (unterminated_tail) {
      // Drop the torn tail so new appends start on a clean line.
      auto keep = text.substr(0, text.rfind('\n') == std::string::npos ? 0 : text.rfind('\n') + 1);
      std::ofstream rewrite(*journal_path_, std::ios::binary | std::ios::trunc);
      rewrite << keep;
    }
  }
}

void Registry::open_journal() {
  if (!journal_path_ || journal_.is_open()) return;
  journal_.open(*journal_path_, std::ios::binary | std::ios::app);
  if (!journal_) throw Error(ErrorCode::Busy, "cannot open journal " + journal_path_->string());
}

void Registry::arm_crash(std::size_t at_append, CrashPoint point) { crash_ = {at_append, point}; }

void Registry::commit(const JournalRecord& record) {
  std::size_t n = written_ + 1;
  bool crash_here = crash_ && crash_->first == n;
  if (crash_here && crash_->second == CrashPoint::BeforeAppend) throw SimulatedCrash{};
  if (journal_path_) {
    open_journal();
    auto line = record.to_json_line() + "\n";
    if (crash_here && crash_->second == CrashPoint::TornAppend) {
      journal_.write(line.data(), static_cast<std::streamsize>(line.size() / 2));
      journal_.flush();
      throw SimulatedCrash{};
    }
    journal_.write(line.data(), static_cast<std::streamsize>(line.size()));
    journal_.flush();
    if (!journal_) {
      journal_.clear();
      throw Error(ErrorCode::Busy, "journal write failed");
    }
  }
  ++written_;
  if (crash_here) throw SimulatedCrash{};
  apply(record);
}

void Registry::apply(const JournalRecord& r) {
  if (r.event == event::kPoRevoked) {
    auto po = array_from_hex<8>(r.po_hex);
    revoked_pos_.push_back(po);
    if (auto it = pos_.find(po); it != pos_.end()) it->second.revoked = true;
    return;
  }
  auto id = array_from_hex<12>(r.id_hex);
  auto& e = entries_[id];
  e.id = id;
  if (!r.po_hex.empty()) e.po = array_from_hex<8>(r.po_hex);
  e.audit.push_back({r.ts, r.event});

  auto key = [&] {
    if (!r.key_hex) throw Error(ErrorCode::CorruptRegistry, r.event + " without key_hex");
    return crypto::SymmetricKey::from_hex(*r.key_hex);
  };

  if (r.event == event::kAkPending) {
    e.pending_ak = key();
    if (e.status == EntryStatus::Unseen) e.status = EntryStatus::PendingAk;
  } else if (r.event == event::kAkActive) {
    auto k = key();
    e.ak = k;
    if (e.pending_ak == k) e.pending_ak.reset();
    if (!e.activated_at) e.activated_at = r.ts;
    e.status = EntryStatus::Active;
  } else if (r.event == event::kCkRegistered) {
    ++e.cloud_key_seq;
  } else if (r.event == event::kCkActivated) {
  } else if (r.event == event::kRevoked) {
    e.status = EntryStatus::Revoked;
  } else if (r.event == event::kReset) {
    e.status = EntryStatus::Unseen;
    e.ak.reset();
    e.pending_ak.reset();
    e.activated_at.reset();
  } else {
    throw Error(ErrorCode::CorruptRegistry, "unknown event " + r.event);
  }
}

void Registry::compact() {
  if (!journal_path_) return;
  json entries = json::array();
  for (const auto& [id, e] : entries_) {
    json j{{"id_hex", to_hex(id)},
           {"po_hex", to_hex(e.po)},
           {"status", std::string(to_string(e.status))},
           {"cloud_key_seq", e.cloud_key_seq}};
    if (e.ak) j["ak_hex"] = e.ak->hex();
    if (e.pending_ak) j["pending_hex"] = e.pending_ak->hex();
    if (e.activated_at) j["activated_at"] = *e.activated_at;
    entries.push_back(std::move(j));
  }
  json revoked = json::array();
  for (const auto& po : revoked_pos_) revoked.push_back(to_hex(po));

  auto snap = snapshot_path();
  auto tmp = snap;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    out << json{{"entries", entries}, {"revoked_pos", revoked}}.dump() << "\n";
    out.flush();
    if (!out) throw Error(ErrorCode::Busy, "snapshot write failed");
  }
  std::filesystem::rename(tmp, snap);
  journal_.close();
  std::ofstream(*journal_path_, std::ios::trunc).close();
}

const RegistryEntry* Registry::find(const DeviceId& id) const {
  auto it = entries_.find(id);
  return it == entries_.end() ? nullptr : &it->second;
}

const ProductOrderRecord* Registry::find_po(const ProductOrder& po) const {
  auto it = pos_.find(po);
  return it == pos_.end() ? nullptr : &it->second;
}

}  // namespace otakey::agent
