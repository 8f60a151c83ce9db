#include <gtest/gtest.h>

#include <cstring>
#include <random>
#include <thread>

#include "splitstream/errors.hpp"
#include "splitstream/link.hpp"
#include "splitstream/wire.hpp"
#include "test_util.hpp"

using namespace splitstream;
using namespace splitstream::wire;

namespace {

float random_bits_float(std::mt19937_64& rng) {
  // Arbitrary finite bit patterns, including denormals and negative zero.
  for (;;) {
    const auto bits = static_cast<std::uint32_t>(rng());
    float f;
    std::memcpy(&f, &bits, 4);
    if (std::isfinite(f)) return f;
  }
}

ForwardMsg random_forward(std::mt19937_64& rng) {
  ForwardMsg m;
  m.batch_id = rng();
  m.stage = static_cast<std::uint32_t>(rng() % 8);
  m.phi = 1 + static_cast<std::uint32_t>(rng() % 16);
  m.height = 1 + static_cast<std::uint32_t>(rng() % 5);
  m.width = 1 + static_cast<std::uint32_t>(rng() % 5);
  m.batch = 1 + static_cast<std::uint32_t>(rng() % 4);
  m.inference = rng() % 4 == 0;
  const auto b = 1 + rng() % m.phi;
  std::vector<std::int32_t> all(m.phi);
  for (std::uint32_t i = 0; i < m.phi; ++i) all[i] = static_cast<std::int32_t>(i);
  std::shuffle(all.begin(), all.end(), rng);
  m.indices.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(b));
  std::sort(m.indices.begin(), m.indices.end());
  for (std::uint32_t i = 0; i < m.phi; ++i) m.f.push_back(random_bits_float(rng));
  if (!m.inference)
    for (std::uint32_t i = 0; i < m.batch; ++i) m.labels.push_back(static_cast<std::int32_t>(rng() % 10));
  m.payload.resize(b * m.height * m.width * m.batch);
  for (auto& v : m.payload) v = random_bits_float(rng);
  return m;
}

BackwardMsg random_backward(std::mt19937_64& rng) {
  BackwardMsg m;
  m.batch_id = rng();
  m.phi = 1 + static_cast<std::uint32_t>(rng() % 16);
  m.b = 1 + static_cast<std::uint32_t>(rng() % m.phi);
  m.height = 1 + static_cast<std::uint32_t>(rng() % 5);
  m.width = 1 + static_cast<std::uint32_t>(rng() % 5);
  m.batch = 1 + static_cast<std::uint32_t>(rng() % 4);
  m.task_loss = random_bits_float(rng);
  m.prune_loss = random_bits_float(rng);
  m.grad_payload.resize(m.b * m.height * m.width * m.batch);
  for (auto& v : m.grad_payload) v = random_bits_float(rng);
  for (std::uint32_t i = 0; i < m.phi; ++i) m.grad_f.push_back(random_bits_float(rng));
  return m;
}

ControlMsg random_control(std::mt19937_64& rng) {
  ControlMsg m;
  m.kind = static_cast<ControlKind>(1 + rng() % 3);
  m.stage = static_cast<std::uint32_t>(rng());
  m.budget_target = random_bits_float(rng);
  m.b = static_cast<std::uint32_t>(rng());
  m.epoch = static_cast<std::uint32_t>(rng());
  return m;
}

AckMsg random_ack(std::mt19937_64& rng) {
  AckMsg m;
  const auto n = rng() % 6;
  for (std::uint64_t i = 0; i < n; ++i) m.predictions.push_back(static_cast<std::int32_t>(rng()));
  return m;
}

// Compares float vectors by bit pattern.
bool same_bits(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b) { return a == b; }

}  // namespace

TEST(Codec, FuzzedRoundTripsAreBitIdentical) {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 10000; ++i) {
    switch (i % 4) {
      case 0: {
        const auto m = random_forward(rng);
        const auto bytes = encode(m);
        ASSERT_EQ(bytes.size(), forward_frame_size(m.b(), m.phi, m.height, m.width, m.batch, m.inference));
        ASSERT_TRUE(same_bits(encode(decode_forward(bytes)), bytes));
        break;
      }
      case 1: {
        const auto m = random_backward(rng);
        const auto bytes = encode(m);
        ASSERT_EQ(bytes.size(), backward_frame_size(m.b, m.phi, m.height, m.width, m.batch));
        ASSERT_TRUE(same_bits(encode(decode_backward(bytes)), bytes));
        break;
      }
      case 2: {
        const auto m = random_control(rng);
        const auto bytes = encode(m);
        ASSERT_EQ(bytes.size(), control_frame_size());
        ASSERT_TRUE(same_bits(encode(decode_control(bytes)), bytes));
        break;
      }
      default: {
        const auto m = random_ack(rng);
        const auto bytes = encode(m);
        ASSERT_EQ(decode_ack(bytes), m);
        break;
      }
    }
  }
}

TEST(Codec, SingleHeaderByteMutationsRejectedOrDistinct) {
  std::mt19937_64 rng(2);
  int rejected = 0, distinct = 0;
  for (int i = 0; i < 10000; ++i) {
    const auto m = random_forward(rng);
    auto bytes = encode(m);
    const auto pos = rng() % kHeaderSize;
    std::uint8_t delta = 0;
    while (delta == 0) delta = static_cast<std::uint8_t>(rng());
    bytes[pos] ^= delta;
    try {
      const auto back = decode_forward(bytes);
      ASSERT_NE(back, m) << "mutation at byte " << pos << " went unnoticed";
      ++distinct;
    } catch (const FramingError&) {
      ++rejected;
    } catch (const ProtocolError&) {
      ++rejected;
    } catch (const ValidationError&) {
      ++rejected;
    }
  }
  EXPECT_EQ(rejected + distinct, 10000);
}

TEST(Codec, ForwardSizeFormula) {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 200; ++i) {
    auto m = random_forward(rng);
    m.inference = false;
    m.labels.assign(m.batch, 0);
    const std::uint64_t b = m.b(), phi = m.phi, batch = m.batch, hw = std::uint64_t{m.height} * m.width;
    EXPECT_EQ(encode(m).size(), 16 + 32 + 4 * b + 4 * phi + 4 * batch + 4 * b * hw * batch);
  }
}

TEST(Codec, PayloadArithmeticAtPhi128) {
  const std::uint64_t floats = 4ull * 16 * 16 * 16;
  EXPECT_EQ(floats, 16384u);
  const auto frame = forward_frame_size(4, 128, 16, 16, 16);
  EXPECT_EQ(frame - (16 + 32 + 4 * 4 + 4 * 128 + 4 * 16), 65536u);
}

TEST(Codec, ThirtyTwoToOnePayloadRatio) {
  auto payload_bytes = [](std::uint64_t b) {
    return forward_frame_size(b, 128, 16, 16, 16) - (16 + 32 + 4 * b + 4 * 128 + 4 * 16);
  };
  EXPECT_EQ(payload_bytes(128), 32 * payload_bytes(4));
  EXPECT_EQ(payload_bytes(128) % payload_bytes(4), 0u);
}

TEST(Codec, BackwardCarriesForwardPayloadPlusFilterGradient) {
  const std::uint64_t b = 4, phi = 128, h = 16, w = 16, batch = 16;
  const auto fwd_payload = 4 * b * h * w * batch;
  EXPECT_EQ(backward_frame_size(b, phi, h, w, batch), 16 + 36 + fwd_payload + 4 * phi);
}

TEST(Codec, TruncationIsFramingError) {
  std::mt19937_64 rng(4);
  const auto bytes = encode(random_forward(rng));
  for (std::size_t cut : {std::size_t{0}, std::size_t{5}, std::size_t{15}, std::size_t{16}, bytes.size() - 1}) {
    const std::span<const std::uint8_t> part(bytes.data(), cut);
    EXPECT_THROW(decode_forward(part), FramingError) << "cut=" << cut;
  }
}

TEST(Codec, MagicAndVersionAreProtocolErrors) {
  std::mt19937_64 rng(5);
  auto bytes = encode(random_control(rng));
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(decode_control(bad_magic), ProtocolError);
  auto bad_version = bytes;
  bad_version[4] = 2;
  EXPECT_THROW(decode_control(bad_version), ProtocolError);
  EXPECT_THROW(decode_forward(bytes), ProtocolError);
}

TEST(Codec, InconsistentLengthsAreValidationErrors) {
  std::mt19937_64 rng(6);
  auto m = random_forward(rng);
  m.payload.push_back(1.0f);
  EXPECT_THROW(encode(m), ValidationError);
  auto unsorted = random_forward(rng);
  while (unsorted.indices.size() < 2) unsorted = random_forward(rng);
  std::swap(unsorted.indices[0], unsorted.indices[1]);
  EXPECT_THROW(encode(unsorted), ValidationError);
  // A trailing byte past the announced length.
  auto bytes = encode(random_ack(rng));
  bytes.push_back(0);
  EXPECT_THROW(decode_ack(bytes), ValidationError);
}

TEST(Codec, ChannelMajorRoundTrip) {
  std::mt19937_64 rng(7);
  const Tensor t = splitstream::testing::random_tensor({3, 4, 2, 5}, rng);
  const auto v = to_channel_major(t);
  // channel 1, sample 2, (h=1,w=3)
  EXPECT_EQ(v[static_cast<std::size_t>(((1 * 3 + 2) * 2 + 1) * 5 + 3)], t.at(2, 1, 1, 3));
  EXPECT_EQ(from_channel_major(v, 3, 4, 2, 5, true), t);
  const Tensor flat = splitstream::testing::random_tensor({3, 4}, rng);
  EXPECT_EQ(from_channel_major(to_channel_major(flat), 3, 4, 1, 1, false), flat);
}

TEST(Loopback, SendThenRecvReturnsIdenticalFrame) {
  auto [a, b] = loopback_link();
  std::mt19937_64 rng(8);
  const auto frame = encode(random_forward(rng));
  a->send(frame);
  EXPECT_EQ(b->recv(), frame);
  EXPECT_EQ(a->counters().tx, frame.size());
  EXPECT_EQ(b->counters().rx, frame.size());
  EXPECT_EQ(b->counters().rx_of(MsgType::Forward), frame.size());
  EXPECT_EQ(a->counters().rx, 0u);
}

TEST(Loopback, RecvBlocksUntilFrameArrives) {
  auto [a, b] = loopback_link();
  const auto frame = encode(ControlMsg{});
  std::thread sender([&, &a = a] {
    std::this_thread::sleep_for(std::chrono::milliseconds(100));
    a->send(frame);
  });
  const auto start = std::chrono::steady_clock::now();
  const auto got = b->recv();
  const auto waited = std::chrono::steady_clock::now() - start;
  sender.join();
  EXPECT_EQ(got, frame);
  EXPECT_GE(waited, std::chrono::milliseconds(90));
}

TEST(Loopback, IdleTimeoutAndClosedPeer) {
  auto [a, b] = loopback_link();
  b->set_timeout(std::chrono::milliseconds(50));
  EXPECT_THROW(b->recv(), TimeoutError);
  a->close();
  EXPECT_THROW(b->recv(), SessionError);
  EXPECT_THROW(b->send(encode(AckMsg{})), SessionError);
}

TEST(Tcp, EndpointParsing) {
  const auto ep = parse_endpoint("127.0.0.1:9000");
  EXPECT_EQ(ep.host, "127.0.0.1");
  EXPECT_EQ(ep.port, 9000);
  EXPECT_THROW(parse_endpoint("localhost"), ValidationError);
  EXPECT_THROW(parse_endpoint("host:"), ValidationError);
  EXPECT_THROW(parse_endpoint(":80"), ValidationError);
  EXPECT_THROW(parse_endpoint("host:70000"), ValidationError);
  EXPECT_THROW(parse_endpoint("host:8x"), ValidationError);
}

TEST(Tcp, ConnectionRefusedIsSessionError) {
  std::uint16_t port;
  {
    Listener l({"127.0.0.1", 0});
    port = l.port();
  }
  EXPECT_THROW(link_connect({"127.0.0.1", port}), SessionError);
}

TEST(Tcp, CountersMatchLoopbackForSameTraffic) {
  std::mt19937_64 rng(9);
  std::vector<std::vector<std::uint8_t>> to_server, to_client;
  for (int i = 0; i < 20; ++i) {
    to_server.push_back(encode(random_forward(rng)));
    to_client.push_back(encode(random_backward(rng)));
  }
  auto exchange = [&](Link& client, Link& server) {
    std::thread srv([&] {
      for (const auto& f : to_client) {
        (void)server.recv();
        server.send(f);
      }
    });
    std::vector<std::vector<std::uint8_t>> got;
    for (const auto& f : to_server) {
      client.send(f);
      got.push_back(client.recv());
    }
    srv.join();
    EXPECT_EQ(got, to_client);
  };

  auto [lc, ls] = loopback_link();
  exchange(*lc, *ls);

  Listener listener({"127.0.0.1", 0});
  std::unique_ptr<Link> tcp_server;
  std::thread acceptor([&] { tcp_server = listener.accept(std::chrono::milliseconds(5000)); });
  auto tcp_client = link_connect({"127.0.0.1", listener.port()});
  acceptor.join();
  exchange(*tcp_client, *tcp_server);

  EXPECT_EQ(tcp_client->counters(), lc->counters());
  EXPECT_EQ(tcp_server->counters(), ls->counters());
  EXPECT_EQ(tcp_client->counters().tx, tcp_server->counters().rx);
}

TEST(Tcp, PeerHangupSurfacesAsSessionError) {
  Listener listener({"127.0.0.1", 0});
  std::unique_ptr<Link> server;
  std::thread acceptor([&] { server = listener.accept(std::chrono::milliseconds(5000)); });
  auto client = link_connect({"127.0.0.1", listener.port()});
  acceptor.join();
  client->close();
  server->set_timeout(std::chrono::milliseconds(2000));
  EXPECT_THROW(server->recv(), SessionError);
}
