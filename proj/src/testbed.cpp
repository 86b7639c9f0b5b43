#include "otakey/testbed.hpp"

#include "otakey/error.hpp"

namespace otakey::testbed {

std::string_view to_string(Flow flow) {
  switch (flow) {
    case Flow::AkInit: return "ak-init";
    case Flow::AkRotate: return "ak-rotate";
    case Flow::CkUpdate: return "ck-update";
  }
  return "?";
}

Flow flow_from_string(std::string_view text) {
  if (text == "ak-init") return Flow::AkInit;
  if (text == "ak-rotate") return Flow::AkRotate;
  if (text == "ck-update") return Flow::CkUpdate;
  throw Error(ErrorCode::Config, "unknown flow " + std::string(text));
}

protocol::DeviceId device_id_for(std::uint64_t index) {
  protocol::DeviceId id{0x00, 0x3a, 0x00, 0x27};  // STM32-style UID prefix
  for (int i = 0; i < 8; ++i) id[11 - i] = static_cast<std::uint8_t>(index >> (8 * i));
  return id;
}

namespace {

cloud::CloudConfig cloud_config(const TestbedOptions& o) {
  cloud::CloudConfig c;
  if (o.connection_info_size > 0) {
    std::size_t id_hex = 24;
    if (o.connection_info_size < id_hex) throw Error(ErrorCode::Config, "connection_info_size too small");
    c.endpoint_prefix = std::string(o.connection_info_size - id_hex, 'x');
    c.endpoint_prefix.replace(0, std::min<std::size_t>(8, c.endpoint_prefix.size()), "mqtts://");
  }
  return c;
}

}  // namespace

Testbed::Testbed(const TestbedOptions& o)
    : pk(crypto::generate_key(o.seed * 4 + 0)),
      identity{device_id_for(o.seed), kDefaultPo},
      cloud(cloud_config(o), crypto::Rng(o.seed * 4 + 1)),
      agent(registry, cloud, crypto::Rng(o.seed * 4 + 2), [] { return std::int64_t{1700000000}; }),
      device(device::burn_device(identity, pk, {}, crypto::Rng(o.seed * 4 + 3), o.flash_size)),
      transport(agent) {
  registry.add_product_order(agent::ProductOrderRecord{kDefaultPo, pk, 1, 0, 4102444800, false});
}

void Testbed::run(Flow flow, device::Transport& t) {
  switch (flow) {
    case Flow::AkInit: request_ak(t); break;
    case Flow::AkRotate: rotate_ak(t); break;
    case Flow::CkUpdate: update_ck(t); break;
  }
}

std::string Testbed::key_consistency_violation() const {
  auto scan = flash::scan_slots(device.flash);
  auto key = scan.agent_channel_key();
  if (!key) return "device holds neither a product key nor an agent key";
  if (!agent.accepts_device_key(identity.id, identity.po, *key)) {
    return std::string(scan.agent ? "agent key" : "product key") + " " + key->hex() +
           " is not in the agent's accept set";
  }
  if (scan.agent && scan.product) return "product key still present next to an agent key";
  if (scan.cloud && !cloud.accepts(identity.id, scan.cloud->record.key)) {
    return "cloud key " + scan.cloud->record.key.hex() + " is not in the cloud's accept set";
  }
  return {};
}

}  // namespace otakey::testbed
