#include "sepdrop/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace sepdrop {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr std::size_t kMagicBytes = sizeof(kCheckpointMagic) - 1;

const char* kind_name(EntryKind k) {
  switch (k) {
    case EntryKind::Parameter: return "param";
    case EntryKind::Buffer: return "buffer";
    case EntryKind::Velocity: return "velocity";
  }
  return "?";
}

EntryKind parse_kind(const std::string& s) {
  if (s == "param") return EntryKind::Parameter;
  if (s == "buffer") return EntryKind::Buffer;
  if (s == "velocity") return EntryKind::Velocity;
  throw CheckpointError("unknown entry kind " + s);
}

template <typename T>
void put(std::vector<std::uint8_t>& out, T v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    T v;
    std::memcpy(&v, take(sizeof(T)), sizeof(T));
    return v;
  }
  const std::uint8_t* take(std::size_t n) {
    if (bytes_.size() - pos_ < n) throw CheckpointError("checkpoint is truncated");
    const std::uint8_t* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

std::string header_text(const Checkpoint& c) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "variant=" << to_string(c.spec.variant) << "\n"
     << "depth=" << c.spec.depth << "\n"
     << "alpha=" << c.spec.alpha << "\n"
     << "p_last=" << c.spec.p_last << "\n"
     << "num_classes=" << c.spec.num_classes << "\n"
     << "base_width=" << c.spec.base_width << "\n"
     << "in_channels=" << c.spec.in_channels << "\n"
     << "image_size=" << c.spec.image_size << "\n"
     << "epoch=" << c.epoch << "\n";
  for (const auto& [k, v] : c.meta) os << "meta." << k << "=" << v << "\n";
  for (const auto& e : c.entries)
    os << "entry " << e.name << " " << kind_name(e.kind) << " " << e.shape.n << " " << e.shape.c << " " << e.shape.h
       << " " << e.shape.w << "\n";
  return os.str();
}

}  // namespace

const CheckpointEntry* Checkpoint::find(const std::string& name, EntryKind kind) const {
  for (const auto& e : entries)
    if (e.kind == kind && e.name == name) return &e;
  return nullptr;
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  for (const auto& e : ckpt.entries) {
    if (std::int64_t(e.values.size()) != e.shape.numel())
      throw CheckpointError("entry " + e.name + " holds " + std::to_string(e.values.size()) + " values for shape " + e.shape.str());
    if (e.name.find_first_of(" \n") != std::string::npos) throw CheckpointError("entry name contains whitespace: " + e.name);
  }
  const std::string header = header_text(ckpt);
  std::vector<std::uint8_t> out(kCheckpointMagic, kCheckpointMagic + kMagicBytes);
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint64_t>(out, header.size());
  out.insert(out.end(), header.begin(), header.end());

  std::uint64_t payload = 0;
  for (const auto& e : ckpt.entries) payload += e.values.size() * sizeof(float);
  put<std::uint64_t>(out, payload);
  const std::size_t start = out.size();
  for (const auto& e : ckpt.entries) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(e.values.data());
    out.insert(out.end(), p, p + e.values.size() * sizeof(float));
  }
  put<std::uint32_t>(out, crc32_of(out.data() + start, payload));
  return out;
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  if (std::memcmp(r.take(kMagicBytes), kCheckpointMagic, kMagicBytes) != 0) throw CheckpointError("not a checkpoint file");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  const auto header_bytes = r.get<std::uint64_t>();
  const auto* h = r.take(header_bytes);
  std::istringstream header(std::string(reinterpret_cast<const char*>(h), header_bytes));

  Checkpoint ckpt;
  std::string line;
  try {
    while (std::getline(header, line)) {
      if (line.rfind("entry ", 0) == 0) {
        std::istringstream is(line.substr(6));
        CheckpointEntry e;
        std::string kind;
        if (!(is >> e.name >> kind >> e.shape.n >> e.shape.c >> e.shape.h >> e.shape.w))
          throw CheckpointError("malformed entry line: " + line);
        e.kind = parse_kind(kind);
        ckpt.entries.push_back(std::move(e));
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw CheckpointError("malformed header line: " + line);
      const std::string key = line.substr(0, eq), value = line.substr(eq + 1);
      if (key == "variant") ckpt.spec.variant = parse_variant(value);
      else if (key == "depth") ckpt.spec.depth = std::stoi(value);
      else if (key == "alpha") ckpt.spec.alpha = std::stod(value);
      else if (key == "p_last") ckpt.spec.p_last = std::stod(value);
      else if (key == "num_classes") ckpt.spec.num_classes = std::stoi(value);
      else if (key == "base_width") ckpt.spec.base_width = std::stoi(value);
      else if (key == "in_channels") ckpt.spec.in_channels = std::stoi(value);
      else if (key == "image_size") ckpt.spec.image_size = std::stoi(value);
      else if (key == "epoch") ckpt.epoch = std::stoi(value);
      else if (key.rfind("meta.", 0) == 0) ckpt.meta[key.substr(5)] = value;
      else throw CheckpointError("unknown header key " + key);
    }
  } catch (const std::logic_error& e) {  // stoi / stod / parse_variant
    throw CheckpointError(std::string("bad checkpoint header: ") + e.what());
  }

  const auto payload = r.get<std::uint64_t>();
  std::uint64_t expected = 0;
  for (const auto& e : ckpt.entries) expected += std::uint64_t(e.shape.numel()) * sizeof(float);
  if (payload != expected) throw CheckpointError("payload size does not match the manifest");
  const auto* data = r.take(payload);
  const auto crc = r.get<std::uint32_t>();
  if (crc != crc32_of(data, payload)) throw CheckpointError("checkpoint checksum mismatch");
  if (!r.done()) throw CheckpointError("trailing bytes after checkpoint");

  for (auto& e : ckpt.entries) {
    e.values.resize(e.shape.numel());
    std::memcpy(e.values.data(), data, e.values.size() * sizeof(float));
    data += e.values.size() * sizeof(float);
  }
  return ckpt;
}

void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(ckpt);
  // Write then rename so a crash never leaves a half-written checkpoint.
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw CheckpointError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    if (!out) throw CheckpointError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_checkpoint(bytes);
  } catch (const CheckpointError& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  }
}

}  // namespace sepdrop
