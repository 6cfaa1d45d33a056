#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "sepdrop/checksum.hpp"
#include "sepdrop/network.hpp"
#include "sepdrop/optimizer.hpp"

namespace sepdrop {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Layout (all integers little-endian):
//   "SEPDROPCKPT\n"  u32 version  u64 header_bytes  header text
//   u64 payload_bytes  payload (float32 values, manifest order)  u32 crc32(payload)
// The header is key=value lines followed by one line per entry:
//   entry <name> <param|buffer|velocity> <n> <c> <h> <w>
inline constexpr char kCheckpointMagic[] = "SEPDROPCKPT\n";
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class EntryKind { Parameter, Buffer, Velocity };

struct CheckpointEntry {
  std::string name;
  EntryKind kind = EntryKind::Parameter;
  Shape shape;
  std::vector<float> values;
};

struct Checkpoint {
  NetworkSpec spec;
  int epoch = 0;  // epochs completed
  std::map<std::string, std::string> meta;
  std::vector<CheckpointEntry> entries;

  const CheckpointEntry* find(const std::string& name, EntryKind kind) const;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Parameters and running statistics of `net`; velocities of each optimizer
/// are added with the replica index appended for replicas after the first
/// (name@k).
template <typename Scalar>
Checkpoint capture_checkpoint(Network<Scalar>& net, int epoch, const std::vector<const SgdNesterov<Scalar>*>& optimizers = {}) {
  Checkpoint ckpt;
  ckpt.spec = net.spec();
  ckpt.epoch = epoch;
  auto to_float = [](const Buffer<Scalar>& b) {
    std::vector<float> v(b.size());
    for (Eigen::Index i = 0; i < b.size(); ++i) v[i] = static_cast<float>(b[i]);
    return v;
  };
  for (auto& p : net.parameters())
    ckpt.entries.push_back({p.name, EntryKind::Parameter, p.tensor.shape(), to_float(p.tensor.data())});
  for (auto& b : net.buffers())
    ckpt.entries.push_back({b.name, EntryKind::Buffer, Shape{1, b.buffer->size(), 1, 1}, to_float(*b.buffer)});
  for (std::size_t k = 0; k < optimizers.size(); ++k) {
    const auto& names = optimizers[k]->names();
    const auto& vel = optimizers[k]->velocities();
    const std::string suffix = k == 0 ? "" : "@" + std::to_string(k);
    for (std::size_t i = 0; i < names.size(); ++i)
      ckpt.entries.push_back({names[i] + suffix, EntryKind::Velocity, Shape{1, vel[i].size(), 1, 1}, to_float(vel[i])});
  }
  return ckpt;
}

/// Loads parameters and running statistics into `net`, whose spec must
/// match. Missing or mis-shaped entries are errors.
template <typename Scalar>
void restore_network(const Checkpoint& ckpt, Network<Scalar>& net) {
  if (!(ckpt.spec == net.spec())) throw CheckpointError("checkpoint spec does not match the network");
  auto fill = [](const CheckpointEntry* e, const std::string& name, Buffer<Scalar>& dst) {
    if (!e) throw CheckpointError("checkpoint lacks entry " + name);
    if (std::int64_t(e->values.size()) != dst.size()) throw CheckpointError("entry " + name + " has the wrong size");
    for (Eigen::Index i = 0; i < dst.size(); ++i) dst[i] = static_cast<Scalar>(e->values[i]);
  };
  for (auto& p : net.parameters()) {
    const CheckpointEntry* e = ckpt.find(p.name, EntryKind::Parameter);
    if (e && !(e->shape == p.tensor.shape())) throw CheckpointError("entry " + p.name + " has shape " + e->shape.str());
    fill(e, p.name, p.tensor.data());
    p.tensor.zero_grad();
  }
  for (auto& b : net.buffers()) fill(ckpt.find(b.name, EntryKind::Buffer), b.name, *b.buffer);
}

/// Restores velocities of replica `replica`'s optimizer.
template <typename Scalar>
void restore_optimizer(const Checkpoint& ckpt, SgdNesterov<Scalar>& opt, int replica = 0) {
  const std::string suffix = replica == 0 ? "" : "@" + std::to_string(replica);
  auto& vel = opt.velocities();
  for (std::size_t i = 0; i < opt.names().size(); ++i) {
    const std::string name = opt.names()[i] + suffix;
    const CheckpointEntry* e = ckpt.find(name, EntryKind::Velocity);
    if (!e) throw CheckpointError("checkpoint lacks velocity " + name);
    if (std::int64_t(e->values.size()) != vel[i].size()) throw CheckpointError("velocity " + name + " has the wrong size");
    for (Eigen::Index j = 0; j < vel[i].size(); ++j) vel[i][j] = static_cast<Scalar>(e->values[j]);
  }
}

}  // namespace sepdrop
