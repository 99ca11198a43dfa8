#include "emma/checkpoint.hpp"

#include <cstring>
#include <json.hpp>
#include <map>

#include "binary_io.hpp"

namespace emma {

namespace {

constexpr char kMagic[8] = {'E', 'M', 'M', 'A', 'C', 'K', 'P', 'T'};
constexpr std::uint8_t kF32 = 0;
constexpr std::uint8_t kF64 = 1;
constexpr std::uint8_t kU8 = 2;

template <typename T>
constexpr std::uint8_t dtype_tag() {
  return std::is_same_v<T, float> ? kF32 : kF64;
}

struct Record {
  std::uint8_t dtype = kF32;
  Shape shape;
  std::vector<double> values;      // f32 / f64 records
  std::vector<std::uint8_t> bytes;  // u8 records
};

template <typename T>
void put_record(detail::ByteWriter& w, const std::string& name, const Shape& shape, const T* data) {
  w.put_string(name);
  if constexpr (std::is_same_v<T, std::uint8_t>) {
    w.put<std::uint8_t>(kU8);
  } else {
    w.put<std::uint8_t>(dtype_tag<T>());
  }
  w.put<std::uint32_t>(static_cast<std::uint32_t>(shape.size()));
  for (auto e : shape) w.put<std::uint64_t>(e);
  w.put_array(data, shape_numel(shape));
}

nlohmann::json meta_to_json(const NetworkSpec& spec, const NetworkMetadata& m, const char* dtype) {
  return {{"spec_id", spec.id()},
          {"num_classes", spec.num_classes},
          {"width_scale", spec.width_scale},
          {"dtype", dtype},
          {"loss", m.loss},
          {"optimizer", m.optimizer},
          {"normalization", m.normalization},
          {"bias_mode", m.bias_mode},
          {"bias_degree", m.bias_degree},
          {"seed", m.seed},
          {"iterations", m.iterations},
          {"landmarks", m.landmarks_json}};
}

std::map<std::string, Record> read_records(const std::filesystem::path& path) {
  const auto data = detail::read_file(path);
  const std::string what = "checkpoint '" + path.string() + "'";
  if (data.size() < sizeof(kMagic) || std::memcmp(data.data(), kMagic, sizeof(kMagic)) != 0) {
    throw FormatError(what + ": bad magic, not an EMMACKPT file");
  }
  detail::ByteReader header(data.data() + sizeof(kMagic), data.size() - sizeof(kMagic), what);
  const auto version = header.get<std::uint32_t>();
  if (version != kCheckpointVersion) throw FormatError(what + ": unsupported version " + std::to_string(version));
  const std::size_t payload_start = sizeof(kMagic) + 4;
  if (data.size() < payload_start + 4) throw TruncationError(what + ": missing payload");
  const std::size_t payload_size = data.size() - payload_start - 4;
  const std::uint8_t* payload = data.data() + payload_start;
  detail::ByteReader tail(payload + payload_size, 4, what);
  const auto stored_crc = tail.get<std::uint32_t>();

  // Parse first so that truncation is reported as such rather than as a CRC error.
  detail::ByteReader r(payload, payload_size, what);
  std::map<std::string, Record> records;
  {
    const auto count = r.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < count; ++i) {
      const std::string name = r.get_string();
      Record rec;
      rec.dtype = r.get<std::uint8_t>();
      if (rec.dtype > kU8) throw FormatError(what + ": unknown dtype tag " + std::to_string(rec.dtype));
      const auto rank = r.get<std::uint32_t>();
      if (rank > 8) throw FormatError(what + ": implausible rank " + std::to_string(rank));
      for (std::uint32_t k = 0; k < rank; ++k) rec.shape.push_back(r.get<std::uint64_t>());
      const std::size_t n = shape_numel(rec.shape);
      if (rec.dtype == kU8) {
        if (n > r.remaining()) r.require(n);
        rec.bytes.resize(n);
        r.get_array(rec.bytes.data(), n);
      } else if (rec.dtype == kF32) {
        if (n > r.remaining() / 4) r.require(r.remaining() + 1);
        std::vector<float> tmp(n);
        r.get_array(tmp.data(), n);
        rec.values.assign(tmp.begin(), tmp.end());
      } else {
        if (n > r.remaining() / 8) r.require(r.remaining() + 1);
        rec.values.resize(n);
        r.get_array(rec.values.data(), n);
      }
      records[name] = std::move(rec);
    }
  }
  if (r.remaining() != 0) throw FormatError(what + ": " + std::to_string(r.remaining()) + " trailing bytes");
  if (detail::crc32_of(payload, payload_size) != stored_crc) throw CrcError(what + ": CRC32 mismatch");
  return records;
}

CheckpointInfo info_from_records(const std::map<std::string, Record>& records, const std::filesystem::path& path) {
  auto it = records.find("__meta__");
  if (it == records.end() || it->second.dtype != kU8) {
    throw FormatError("checkpoint '" + path.string() + "': missing __meta__ record");
  }
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(std::string(it->second.bytes.begin(), it->second.bytes.end()));
    CheckpointInfo info;
    info.spec_id = j.at("spec_id").get<std::string>();
    info.num_classes = j.at("num_classes").get<std::size_t>();
    info.width_scale = j.at("width_scale").get<double>();
    info.dtype = j.at("dtype").get<std::string>();
    auto& m = info.metadata;
    m.loss = j.at("loss").get<std::string>();
    m.optimizer = j.at("optimizer").get<std::string>();
    m.normalization = j.at("normalization").get<std::string>();
    m.bias_mode = j.at("bias_mode").get<std::string>();
    m.bias_degree = j.at("bias_degree").get<int>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.iterations = j.at("iterations").get<std::uint64_t>();
    m.landmarks_json = j.at("landmarks").get<std::string>();
    return info;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint '" + path.string() + "': malformed metadata: " + e.what());
  }
}

template <typename T>
void assign_tensor(const Record& rec, Tensor<T>& dst, const std::string& name, const std::filesystem::path& path) {
  if (rec.dtype == kU8 || rec.shape != dst.shape()) {
    throw CheckpointMismatchError("checkpoint '" + path.string() + "': tensor '" + name + "' has shape " +
                                  shape_str(rec.shape) + ", network expects " + shape_str(dst.shape()));
  }
  for (std::size_t i = 0; i < dst.numel(); ++i) dst[i] = static_cast<T>(rec.values[i]);
}

template <typename T>
void assign_vector(const Record& rec, std::vector<T>& dst, const std::string& name, const std::filesystem::path& path) {
  if (rec.dtype == kU8 || rec.values.size() != dst.size()) {
    throw CheckpointMismatchError("checkpoint '" + path.string() + "': running statistic '" + name +
                                  "' has wrong length");
  }
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(rec.values[i]);
}

template <typename T>
void load_records(const std::map<std::string, Record>& records, Network<T>& net, const std::filesystem::path& path) {
  const CheckpointInfo info = info_from_records(records, path);
  if (info.spec_id != net.spec().id() || info.num_classes != net.spec().num_classes ||
      info.width_scale != net.spec().width_scale) {
    throw CheckpointMismatchError("checkpoint '" + path.string() + "' holds " + info.spec_id + " (K=" +
                                  std::to_string(info.num_classes) + ", width " + std::to_string(info.width_scale) +
                                  "), network is " + net.spec().id());
  }
  std::size_t expected = 1;
  for (auto& [name, t] : net.parameters()) {
    auto it = records.find(name);
    if (it == records.end()) throw CheckpointMismatchError("checkpoint '" + path.string() + "': missing '" + name + "'");
    assign_tensor(it->second, t, name, path);
    ++expected;
  }
  for (auto& [name, st] : net.norm_states()) {
    for (auto [suffix, vec] : {std::pair{".running_mean", &st.running_mean}, std::pair{".running_var", &st.running_var}}) {
      auto it = records.find(name + suffix);
      if (it == records.end()) {
        throw CheckpointMismatchError("checkpoint '" + path.string() + "': missing '" + name + suffix + "'");
      }
      assign_vector(it->second, *vec, name + suffix, path);
      ++expected;
    }
  }
  if (records.size() != expected) {
    throw CheckpointMismatchError("checkpoint '" + path.string() + "' has " + std::to_string(records.size()) +
                                  " records, network needs " + std::to_string(expected));
  }
  net.metadata = info.metadata;
}

}  // namespace

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const Network<T>& net) {
  detail::ByteWriter payload;
  const std::uint32_t count =
      static_cast<std::uint32_t>(1 + net.parameters().size() + 2 * net.norm_states().size());
  payload.put<std::uint32_t>(count);
  const std::string meta =
      meta_to_json(net.spec(), net.metadata, std::is_same_v<T, float> ? "f32" : "f64").dump();
  put_record<std::uint8_t>(payload, "__meta__", {meta.size()}, reinterpret_cast<const std::uint8_t*>(meta.data()));
  for (const auto& [name, t] : net.parameters()) put_record<T>(payload, name, t.shape(), t.data());
  for (const auto& [name, st] : net.norm_states()) {
    put_record<T>(payload, name + ".running_mean", {st.running_mean.size()}, st.running_mean.data());
    put_record<T>(payload, name + ".running_var", {st.running_var.size()}, st.running_var.data());
  }

  detail::ByteWriter file;
  file.put_bytes(kMagic, sizeof(kMagic));
  file.put<std::uint32_t>(kCheckpointVersion);
  file.put_bytes(payload.bytes().data(), payload.bytes().size());
  file.put<std::uint32_t>(detail::crc32_of(payload.bytes().data(), payload.bytes().size()));
  detail::write_file_atomic(path, file.bytes());
}

CheckpointInfo read_checkpoint_info(const std::filesystem::path& path) {
  return info_from_records(read_records(path), path);
}

template <typename T>
Network<T> load_checkpoint(const std::filesystem::path& path) {
  const auto records = read_records(path);
  const CheckpointInfo info = info_from_records(records, path);
  Network<T> net(build_network(info.spec_id, info.num_classes, info.width_scale));
  load_records(records, net, path);
  return net;
}

template <typename T>
void load_checkpoint_into(const std::filesystem::path& path, Network<T>& net) {
  load_records(read_records(path), net, path);
}

template void save_checkpoint<float>(const std::filesystem::path&, const Network<float>&);
template void save_checkpoint<double>(const std::filesystem::path&, const Network<double>&);
template Network<float> load_checkpoint<float>(const std::filesystem::path&);
template Network<double> load_checkpoint<double>(const std::filesystem::path&);
template void load_checkpoint_into<float>(const std::filesystem::path&, Network<float>&);
template void load_checkpoint_into<double>(const std::filesystem::path&, Network<double>&);

}  // namespace emma
