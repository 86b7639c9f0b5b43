#include <gtest/gtest.h>

#include "otakey/cloud.hpp"

using namespace otakey;
using namespace otakey::cloud;

namespace {

const DeviceId kId{0, 0x3a, 0, 0x27, 0, 0, 0, 0, 0, 0, 0, 1};

bool login(CloudService& c, const crypto::SymmetricKey& key) {
  auto ch = c.challenge(kId);
  return c.authenticate(kId, ch, protocol::cloud_auth_proof(key, kId, ch));
}

}  // namespace

TEST(Cloud, UnregisteredDeviceCannotLogIn) {
  CloudService c({}, crypto::Rng(1));
  EXPECT_FALSE(login(c, crypto::generate_key(1)));
  EXPECT_FALSE(c.record(kId));
  EXPECT_FALSE(c.activate_new_disable_old(kId));
}

TEST(Cloud, DualKeyWindowThenActivation) {
  CloudService c({}, crypto::Rng(2));
  auto first = c.issue_key(kId).key;
  ASSERT_TRUE(c.activate_new_disable_old(kId));
  auto second = c.issue_key(kId).key;
  // Both keys work while the device may hold either.
  EXPECT_TRUE(c.accepts(kId, first));
  EXPECT_TRUE(c.accepts(kId, second));
  EXPECT_TRUE(c.activate_new_disable_old(kId));
  EXPECT_FALSE(c.accepts(kId, first));
  EXPECT_TRUE(login(c, second));
}

TEST(Cloud, NewKeyLoginRetiresTheOldOne) {
  CloudService c({}, crypto::Rng(3));
  auto first = c.issue_key(kId).key;
  c.activate_new_disable_old(kId);
  auto second = c.issue_key(kId).key;
  EXPECT_TRUE(login(c, first));  // old key still valid before the switch
  EXPECT_TRUE(login(c, second));
  EXPECT_FALSE(login(c, first));
  EXPECT_EQ(c.successful_logins(), 2u);
}

TEST(Cloud, SupersededPendingKeyKeepsTheActiveOne) {
  CloudService c({}, crypto::Rng(4));
  auto active = c.issue_key(kId).key;
  c.activate_new_disable_old(kId);
  auto lost = c.issue_key(kId).key;
  auto latest = c.issue_key(kId).key;
  EXPECT_TRUE(c.accepts(kId, active));
  EXPECT_FALSE(c.accepts(kId, lost));
  EXPECT_TRUE(c.accepts(kId, latest));
}

TEST(Cloud, ChallengeIsSingleUse) {
  CloudService c({}, crypto::Rng(5));
  auto key = c.issue_key(kId).key;
  auto ch = c.challenge(kId);
  auto proof = protocol::cloud_auth_proof(key, kId, ch);
  EXPECT_TRUE(c.authenticate(kId, ch, proof));
  EXPECT_FALSE(c.authenticate(kId, ch, proof));
}

TEST(Cloud, DisableBlocksAllKeys) {
  CloudService c({}, crypto::Rng(6));
  auto key = c.issue_key(kId).key;
  c.disable(kId);
  EXPECT_FALSE(login(c, key));
  EXPECT_TRUE(c.record(kId)->disabled);
}

TEST(Cloud, ConnectionInfoNamesTheDevice) {
  CloudService c({}, crypto::Rng(7));
  auto creds = c.issue_key(kId);
  auto text = std::string(creds.connection_info.begin(), creds.connection_info.end());
  EXPECT_NE(text.find(to_hex(kId)), std::string::npos);
  EXPECT_NE(c.dump_json().find(to_hex(kId)), std::string::npos);
}
