#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "splitstream/tensor.hpp"

// Frame layout (all integers little-endian, floats IEEE 754 binary32):
//
//   header   magic "SPLW" | version u8 | msg_type u8 | flags u16 | payload_length u64
//   forward  batch_id u64 | stage u32 | b u32 | phi u32 | H' u32 | W' u32 | batch u32
//            | indices b*i32 | f phi*f32 | labels batch*i32 (absent with the inference flag)
//            | payload b*batch*H'*W' f32, channel-major
//   backward batch_id u64 | b u32 | phi u32 | H' u32 | W' u32 | batch u32
//            | task_loss f32 | prune_loss f32 | grad_payload (as forward payload) | grad_f phi*f32
//   control  kind u8 | 3 reserved bytes | stage u32 | B f32 | b u32 | epoch u32
//   ack      count u32 | count*i32
namespace splitstream::wire {

enum class MsgType : std::uint8_t { Forward = 1, Backward = 2, Control = 3, Ack = 4 };

inline constexpr std::uint8_t kVersion = 1;
inline constexpr std::size_t kHeaderSize = 16;
inline constexpr std::size_t kForwardFixed = 32;
inline constexpr std::size_t kBackwardFixed = 36;
inline constexpr std::size_t kControlSize = 20;
inline constexpr std::uint16_t kFlagInference = 0x1;
// Frames larger than this are refused before any allocation.
inline constexpr std::uint64_t kMaxPayload = 1ull << 31;

const char* msg_type_name(MsgType t);

struct FrameHeader {
  MsgType type = MsgType::Ack;
  std::uint16_t flags = 0;
  std::uint64_t payload_length = 0;
};

/// Parses and checks the 16-byte header. Bad magic, version, type or flag
/// bits are ProtocolErrors; fewer than 16 bytes is a FramingError.
FrameHeader decode_header(std::span<const std::uint8_t> bytes);

struct ForwardMsg {
  std::uint64_t batch_id = 0;
  std::uint32_t stage = 0;
  std::uint32_t phi = 0;
  std::uint32_t height = 1;
  std::uint32_t width = 1;
  std::uint32_t batch = 0;
  bool inference = false;
  std::vector<std::int32_t> indices;  // strictly increasing, in [0, phi)
  std::vector<float> f;               // phi values
  std::vector<std::int32_t> labels;   // batch values; empty for inference
  std::vector<float> payload;         // channel-major [b][batch][H'][W']

  std::uint32_t b() const { return static_cast<std::uint32_t>(indices.size()); }
  bool operator==(const ForwardMsg&) const = default;
};

struct BackwardMsg {
  std::uint64_t batch_id = 0;
  std::uint32_t b = 0;
  std::uint32_t phi = 0;
  std::uint32_t height = 1;
  std::uint32_t width = 1;
  std::uint32_t batch = 0;
  float task_loss = 0.0f;
  float prune_loss = 0.0f;
  std::vector<float> grad_payload;  // same layout as ForwardMsg::payload
  std::vector<float> grad_f;        // phi values

  bool operator==(const BackwardMsg&) const = default;
};

enum class ControlKind : std::uint8_t { StageChange = 1, EndOfEpoch = 2, Shutdown = 3 };

struct ControlMsg {
  ControlKind kind = ControlKind::StageChange;
  std::uint32_t stage = 0;
  float budget_target = 0.0f;
  std::uint32_t b = 0;
  std::uint32_t epoch = 0;

  bool operator==(const ControlMsg&) const = default;
};

/// Acknowledges a control message (empty) or answers an inference forward
/// with the predicted class per sample.
struct AckMsg {
  std::vector<std::int32_t> predictions;

  bool operator==(const AckMsg&) const = default;
};

std::vector<std::uint8_t> encode(const ForwardMsg& m);
std::vector<std::uint8_t> encode(const BackwardMsg& m);
std::vector<std::uint8_t> encode(const ControlMsg& m);
std::vector<std::uint8_t> encode(const AckMsg& m);

/// Each decoder takes a whole frame (header included). A frame of another
/// type is a ProtocolError; body lengths that disagree with the fields are
/// ValidationErrors.
ForwardMsg decode_forward(std::span<const std::uint8_t> frame);
BackwardMsg decode_backward(std::span<const std::uint8_t> frame);
ControlMsg decode_control(std::span<const std::uint8_t> frame);
AckMsg decode_ack(std::span<const std::uint8_t> frame);

/// Exact frame sizes.
std::uint64_t forward_frame_size(std::uint64_t b, std::uint64_t phi, std::uint64_t h, std::uint64_t w,
                                 std::uint64_t batch, bool inference = false);
std::uint64_t backward_frame_size(std::uint64_t b, std::uint64_t phi, std::uint64_t h, std::uint64_t w,
                                  std::uint64_t batch);
std::uint64_t control_frame_size();
std::uint64_t ack_frame_size(std::uint64_t count);

/// [batch, b, H', W'] (or [batch, b]) <-> channel-major wire order.
std::vector<float> to_channel_major(const Tensor& t);
Tensor from_channel_major(std::span<const float> v, std::int64_t batch, std::int64_t channels, std::int64_t h,
                          std::int64_t w, bool spatial);

}  // namespace splitstream::wire
