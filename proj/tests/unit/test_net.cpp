#include <gtest/gtest.h>

#include <sys/socket.h>
#include <unistd.h>

#include "otakey/error.hpp"
#include "otakey/net.hpp"
#include "otakey/testbed.hpp"

using namespace otakey;
using namespace otakey::net;

TEST(Endpoint, Parse) {
  auto ep = Endpoint::parse("10.0.0.2:7001");
  EXPECT_EQ(ep.host, "10.0.0.2");
  EXPECT_EQ(ep.port, 7001);
  EXPECT_EQ(ep.str(), "10.0.0.2:7001");
  EXPECT_THROW(Endpoint::parse("nohost"), Error);
  EXPECT_THROW(Endpoint::parse("h:99999"), Error);
}

TEST(Frame, EncodeDecode) {
  protocol::Frame f{protocol::MsgType::AkRequest, Bytes{1, 2, 3}, Bytes(100, 7)};
  EXPECT_EQ(protocol::Frame::decode(f.encode()), f);
  EXPECT_THROW(protocol::Frame::decode(Bytes{0x01}), Error);
  EXPECT_THROW(protocol::Frame::decode(Bytes{0x01, 0x05, 0x00}), Error);
}

TEST(FrameServer, EchoesFrames) {
  FrameServer server(Endpoint{"127.0.0.1", 0}, [](const protocol::Frame& f) {
    auto reply = f;
    reply.type = protocol::MsgType::CloudOk;
    return reply;
  });
  ASSERT_NE(server.port(), 0);
  SocketTransport t(server.endpoint());
  for (int i = 0; i < 3; ++i) {
    protocol::Frame f{protocol::MsgType::AkRequest, Bytes{static_cast<std::uint8_t>(i)}, Bytes(1000, 1)};
    auto reply = t.exchange(f);
    ASSERT_TRUE(reply);
    EXPECT_EQ(reply->type, protocol::MsgType::CloudOk);
    EXPECT_EQ(reply->header, f.header);
  }
}

TEST(FrameServer, OversizeLengthPrefixIsRejected) {
  FrameServer server(Endpoint{"127.0.0.1", 0}, [](const protocol::Frame& f) { return f; });
  auto sock = connect_tcp(server.endpoint());
  std::uint8_t prefix[4] = {0x7f, 0xff, 0xff, 0xff};
  ASSERT_EQ(::write(sock.fd(), prefix, 4), 4);
  sock.set_timeout(std::chrono::seconds(2));
  // The server drops the connection instead of allocating.
  EXPECT_FALSE(read_frame(sock));
}

TEST(ReadFrame, ThrowsOnOversizePrefix) {
  int fds[2];
  ASSERT_EQ(::socketpair(AF_UNIX, SOCK_STREAM, 0, fds), 0);
  std::uint8_t prefix[4] = {0x01, 0x00, 0x00, 0x01};  // kMaxFrame + 1
  ASSERT_EQ(::write(fds[1], prefix, 4), 4);
  Socket reader(fds[0]);
  EXPECT_THROW(read_frame(reader), Error);
  ::close(fds[1]);
}

TEST(RemoteCloud, FullProvisioningOverSockets) {
  cloud::CloudService cloud({}, crypto::Rng(1));
  FrameServer cloud_server(Endpoint{"127.0.0.1", 0}, [&](const protocol::Frame& f) { return cloud.handle(f); });
  RemoteCloud remote(cloud_server.endpoint());
  agent::Registry registry;
  auto pk = crypto::generate_key(2);
  registry.add_product_order({testbed::kDefaultPo, pk, 10, 0, 4102444800, false});
  agent::Agent agent(registry, remote, crypto::Rng(3));
  FrameServer agent_server(Endpoint{"127.0.0.1", 0}, [&](const protocol::Frame& f) { return agent.handle(f); });

  auto dev = device::burn_device({testbed::device_id_for(1), testbed::kDefaultPo}, pk, {}, crypto::Rng(4));
  SocketTransport t(agent_server.endpoint());
  device::device_request_ak(dev, t);
  device::device_update_cloud_key(dev, t);
  EXPECT_TRUE(device::device_cloud_login(dev, remote));
  device::device_rotate_ak(dev, t);
  device::device_update_cloud_key(dev, t);
  EXPECT_TRUE(device::device_cloud_login(dev, remote));
  EXPECT_EQ(cloud.successful_logins(), 2u);
}
