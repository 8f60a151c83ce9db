#include "splitstream/wire.hpp"

#include <algorithm>
#include <string>

#include "splitstream/bytes.hpp"
#include "splitstream/errors.hpp"

namespace splitstream::wire {

namespace {

constexpr char kMagic[4] = {'S', 'P', 'L', 'W'};

void write_header(ByteWriter& w, MsgType type, std::uint16_t flags, std::uint64_t length) {
  w.bytes(std::string_view(kMagic, 4));
  w.u8(kVersion);
  w.u8(static_cast<std::uint8_t>(type));
  w.u16(flags);
  w.u64(length);
}

std::vector<std::uint8_t> start_frame(MsgType type, std::uint16_t flags, std::uint64_t body) {
  std::vector<std::uint8_t> out;
  out.reserve(kHeaderSize + body);
  ByteWriter w(out);
  write_header(w, type, flags, body);
  return out;
}

// Checks the header against the expected type and returns a reader over the body.
ByteReader open_frame(std::span<const std::uint8_t> frame, MsgType expected, FrameHeader& h) {
  h = decode_header(frame);
  if (h.type != expected) {
    throw ProtocolError(std::string("expected a ") + msg_type_name(expected) + " frame, got " + msg_type_name(h.type));
  }
  if (expected != MsgType::Forward && (h.flags & kFlagInference)) {
    throw ProtocolError("inference flag set on a non-forward frame");
  }
  const auto body = frame.size() - kHeaderSize;
  if (h.payload_length > body) {
    throw FramingError("truncated frame: header announces " + std::to_string(h.payload_length) + " body bytes, have " +
                       std::to_string(body));
  }
  if (h.payload_length < body) {
    throw ValidationError("frame has " + std::to_string(body - h.payload_length) + " bytes past its announced length");
  }
  return ByteReader(frame.subspan(kHeaderSize));
}

void expect_body(std::uint64_t expected, std::uint64_t actual, const char* what) {
  if (expected != actual) {
    throw ValidationError(std::string(what) + " body is " + std::to_string(actual) + " bytes but its fields imply " +
                          std::to_string(expected));
  }
}

void check_indices(std::span<const std::int32_t> idx, std::uint32_t phi) {
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || static_cast<std::uint32_t>(idx[i]) >= phi) {
      throw ValidationError("channel index " + std::to_string(idx[i]) + " outside [0," + std::to_string(phi) + ")");
    }
    if (i > 0 && idx[i] <= idx[i - 1]) throw ValidationError("channel indices must be strictly increasing");
  }
}

std::uint64_t payload_floats(std::uint64_t b, std::uint64_t h, std::uint64_t w, std::uint64_t batch) {
  return b * h * w * batch;
}

// Rejects field combinations whose implied size cannot fit in the frame,
// before any size arithmetic can wrap.
void check_extents(std::uint64_t b, std::uint64_t phi, std::uint64_t h, std::uint64_t w, std::uint64_t batch,
                   std::uint64_t body) {
  const unsigned __int128 floats = static_cast<unsigned __int128>(b) * h * w * batch;
  if (floats * 4 > body || 4 * static_cast<unsigned __int128>(phi) > body || 4 * static_cast<unsigned __int128>(b) > body ||
      4 * static_cast<unsigned __int128>(batch) > body) {
    throw ValidationError("frame fields announce more data than the " + std::to_string(body) + "-byte body holds");
  }
}

void read_i32s(ByteReader& r, std::vector<std::int32_t>& out, std::size_t n) {
  out.resize(n);
  for (auto& v : out) v = r.i32();
}

void read_f32s(ByteReader& r, std::vector<float>& out, std::size_t n) {
  out.resize(n);
  r.f32s(out);
}

}  // namespace

const char* msg_type_name(MsgType t) {
  switch (t) {
    case MsgType::Forward: return "forward";
    case MsgType::Backward: return "backward";
    case MsgType::Control: return "control";
    case MsgType::Ack: return "ack";
  }
  return "unknown";
}

FrameHeader decode_header(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kHeaderSize) {
    throw FramingError("frame shorter than its " + std::to_string(kHeaderSize) + "-byte header");
  }
  ByteReader r(bytes);
  if (r.bytes(4) != std::string_view(kMagic, 4)) throw ProtocolError("bad frame magic");
  const auto version = r.u8();
  if (version != kVersion) throw ProtocolError("unsupported wire version " + std::to_string(version));
  const auto type = r.u8();
  if (type < 1 || type > 4) throw ProtocolError("unknown message type " + std::to_string(type));
  FrameHeader h;
  h.type = static_cast<MsgType>(type);
  h.flags = r.u16();
  if (h.flags & ~kFlagInference) throw ProtocolError("unknown flag bits " + std::to_string(h.flags));
  h.payload_length = r.u64();
  if (h.payload_length > kMaxPayload) {
    throw ProtocolError("frame length " + std::to_string(h.payload_length) + " exceeds the protocol limit");
  }
  return h;
}

std::uint64_t forward_frame_size(std::uint64_t b, std::uint64_t phi, std::uint64_t h, std::uint64_t w,
                                 std::uint64_t batch, bool inference) {
  return kHeaderSize + kForwardFixed + 4 * b + 4 * phi + (inference ? 0 : 4 * batch) +
         4 * payload_floats(b, h, w, batch);
}

std::uint64_t backward_frame_size(std::uint64_t b, std::uint64_t phi, std::uint64_t h, std::uint64_t w,
                                  std::uint64_t batch) {
  return kHeaderSize + kBackwardFixed + 4 * payload_floats(b, h, w, batch) + 4 * phi;
}

std::uint64_t control_frame_size() { return kHeaderSize + kControlSize; }

std::uint64_t ack_frame_size(std::uint64_t count) { return kHeaderSize + 4 + 4 * count; }

std::vector<std::uint8_t> encode(const ForwardMsg& m) {
  if (m.f.size() != m.phi) throw ValidationError("forward: f has " + std::to_string(m.f.size()) + " entries for phi=" + std::to_string(m.phi));
  if (m.b() == 0 || m.b() > m.phi) throw ValidationError("forward: b must lie in [1, phi]");
  check_indices(m.indices, m.phi);
  if (m.inference ? !m.labels.empty() : m.labels.size() != m.batch) {
    throw ValidationError("forward: label count does not match batch size");
  }
  if (m.payload.size() != payload_floats(m.b(), m.height, m.width, m.batch)) {
    throw ValidationError("forward: payload length does not match b*H'*W'*batch");
  }
  const auto total = forward_frame_size(m.b(), m.phi, m.height, m.width, m.batch, m.inference);
  auto out = start_frame(MsgType::Forward, m.inference ? kFlagInference : 0, total - kHeaderSize);
  ByteWriter w(out);
  w.u64(m.batch_id);
  w.u32(m.stage);
  w.u32(m.b());
  w.u32(m.phi);
  w.u32(m.height);
  w.u32(m.width);
  w.u32(m.batch);
  w.i32s(m.indices);
  w.f32s(m.f);
  if (!m.inference) w.i32s(m.labels);
  w.f32s(m.payload);
  return out;
}

ForwardMsg decode_forward(std::span<const std::uint8_t> frame) {
  FrameHeader h;
  ByteReader r = open_frame(frame, MsgType::Forward, h);
  ForwardMsg m;
  m.inference = (h.flags & kFlagInference) != 0;
  m.batch_id = r.u64();
  m.stage = r.u32();
  const auto b = r.u32();
  m.phi = r.u32();
  m.height = r.u32();
  m.width = r.u32();
  m.batch = r.u32();
  check_extents(b, m.phi, m.height, m.width, m.batch, h.payload_length);
  expect_body(forward_frame_size(b, m.phi, m.height, m.width, m.batch, m.inference) - kHeaderSize,
              h.payload_length, "forward");
  if (b == 0 || b > m.phi) throw ValidationError("forward: b must lie in [1, phi]");
  read_i32s(r, m.indices, b);
  check_indices(m.indices, m.phi);
  read_f32s(r, m.f, m.phi);
  if (!m.inference) read_i32s(r, m.labels, m.batch);
  read_f32s(r, m.payload, payload_floats(b, m.height, m.width, m.batch));
  return m;
}

std::vector<std::uint8_t> encode(const BackwardMsg& m) {
  if (m.grad_f.size() != m.phi) throw ValidationError("backward: grad_f length does not match phi");
  if (m.grad_payload.size() != payload_floats(m.b, m.height, m.width, m.batch)) {
    throw ValidationError("backward: gradient length does not match b*H'*W'*batch");
  }
  const auto total = backward_frame_size(m.b, m.phi, m.height, m.width, m.batch);
  auto out = start_frame(MsgType::Backward, 0, total - kHeaderSize);
  ByteWriter w(out);
  w.u64(m.batch_id);
  w.u32(m.b);
  w.u32(m.phi);
  w.u32(m.height);
  w.u32(m.width);
  w.u32(m.batch);
  w.f32(m.task_loss);
  w.f32(m.prune_loss);
  w.f32s(m.grad_payload);
  w.f32s(m.grad_f);
  return out;
}

BackwardMsg decode_backward(std::span<const std::uint8_t> frame) {
  FrameHeader h;
  ByteReader r = open_frame(frame, MsgType::Backward, h);
  BackwardMsg m;
  m.batch_id = r.u64();
  m.b = r.u32();
  m.phi = r.u32();
  m.height = r.u32();
  m.width = r.u32();
  m.batch = r.u32();
  check_extents(m.b, m.phi, m.height, m.width, m.batch, h.payload_length);
  expect_body(backward_frame_size(m.b, m.phi, m.height, m.width, m.batch) - kHeaderSize, h.payload_length,
              "backward");
  m.task_loss = r.f32();
  m.prune_loss = r.f32();
  read_f32s(r, m.grad_payload, payload_floats(m.b, m.height, m.width, m.batch));
  read_f32s(r, m.grad_f, m.phi);
  return m;
}

std::vector<std::uint8_t> encode(const ControlMsg& m) {
  auto out = start_frame(MsgType::Control, 0, kControlSize);
  ByteWriter w(out);
  w.u8(static_cast<std::uint8_t>(m.kind));
  w.u8(0);
  w.u8(0);
  w.u8(0);
  w.u32(m.stage);
  w.f32(m.budget_target);
  w.u32(m.b);
  w.u32(m.epoch);
  return out;
}

ControlMsg decode_control(std::span<const std::uint8_t> frame) {
  FrameHeader h;
  ByteReader r = open_frame(frame, MsgType::Control, h);
  expect_body(kControlSize, h.payload_length, "control");
  ControlMsg m;
  const auto kind = r.u8();
  if (kind < 1 || kind > 3) throw ProtocolError("unknown control kind " + std::to_string(kind));
  m.kind = static_cast<ControlKind>(kind);
  for (int i = 0; i < 3; ++i)
    if (r.u8() != 0) throw ProtocolError("reserved control bytes must be zero");
  m.stage = r.u32();
  m.budget_target = r.f32();
  m.b = r.u32();
  m.epoch = r.u32();
  return m;
}

std::vector<std::uint8_t> encode(const AckMsg& m) {
  auto out = start_frame(MsgType::Ack, 0, ack_frame_size(m.predictions.size()) - kHeaderSize);
  ByteWriter w(out);
  w.u32(static_cast<std::uint32_t>(m.predictions.size()));
  w.i32s(m.predictions);
  return out;
}

AckMsg decode_ack(std::span<const std::uint8_t> frame) {
  FrameHeader h;
  ByteReader r = open_frame(frame, MsgType::Ack, h);
  const auto count = r.u32();
  expect_body(ack_frame_size(count) - kHeaderSize, h.payload_length, "ack");
  AckMsg m;
  read_i32s(r, m.predictions, count);
  return m;
}

std::vector<float> to_channel_major(const Tensor& t) {
  if (t.rank() != 2 && t.rank() != 4) throw DimensionError("payload must be rank 2 or 4, got " + shape_str(t.shape()));
  const auto batch = t.dim(0), c = t.dim(1);
  const auto plane = t.rank() == 4 ? t.dim(2) * t.dim(3) : 1;
  std::vector<float> out(t.size());
  for (std::int64_t k = 0; k < c; ++k)
    for (std::int64_t n = 0; n < batch; ++n) {
      const float* src = t.raw() + (n * c + k) * plane;
      std::copy(src, src + plane, out.begin() + (k * batch + n) * plane);
    }
  return out;
}

Tensor from_channel_major(std::span<const float> v, std::int64_t batch, std::int64_t channels, std::int64_t h,
                          std::int64_t w, bool spatial) {
  const auto plane = h * w;
  if (static_cast<std::int64_t>(v.size()) != batch * channels * plane) {
    throw DimensionError("wire payload of " + std::to_string(v.size()) + " floats does not fit the announced extents");
  }
  Tensor t(spatial ? Shape{batch, channels, h, w} : Shape{batch, channels});
  for (std::int64_t k = 0; k < channels; ++k)
    for (std::int64_t n = 0; n < batch; ++n) {
      const float* src = v.data() + (k * batch + n) * plane;
      std::copy(src, src + plane, t.raw() + (n * channels + k) * plane);
    }
  return t;
}

}  // namespace splitstream::wire
