#include "drivenet/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <map>

namespace drivenet {

namespace {

constexpr char kMagic[8] = {'F', 'R', 'F', 'C', 'N', 'C', 'K', 'P'};
constexpr std::uint16_t kVersion = 1;
constexpr char kStepRecord[] = "opt.step";

void put_u16(std::ostream& out, std::uint16_t v) {
  const char b[2] = {static_cast<char>(v & 0xff), static_cast<char>(v >> 8)};
  out.write(b, 2);
}
void put_u32(std::ostream& out, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(b, 4);
}

void write_record(std::ostream& out, const std::string& name,
                  const std::vector<int>& shape, const float* values,
                  Index count) {
  put_u16(out, static_cast<std::uint16_t>(name.size()));
  out.write(name.data(), static_cast<std::streamsize>(name.size()));
  out.put(static_cast<char>(shape.size()));
  for (int e : shape) put_u32(out, static_cast<std::uint32_t>(e));
  for (Index i = 0; i < count; ++i) {
    std::uint32_t bits;
    std::memcpy(&bits, &values[i], 4);
    put_u32(out, bits);
  }
}

struct Record {
  std::vector<int> shape;
  std::vector<float> values;
};

class RecordReader {
 public:
  explicit RecordReader(const std::string& path) : in_(path, std::ios::binary) {
    if (!in_) throw std::runtime_error("checkpoint: cannot open " + path);
  }

  void expect_header(std::uint8_t* kind_tag) {
    char magic[8];
    read(magic, 8, "magic");
    if (std::memcmp(magic, kMagic, 8) != 0) {
      throw std::runtime_error("checkpoint: bad magic");
    }
    if (u16() != kVersion) throw std::runtime_error("checkpoint: bad version");
    read(reinterpret_cast<char*>(kind_tag), 1, "kind");
  }

  // false on clean EOF, throws on a partial record
  bool next(std::string* name, Record* rec) {
    in_.peek();
    if (in_.eof()) return false;
    const std::uint16_t name_len = u16();
    name->resize(name_len);
    read(name->data(), name_len, "record name");
    char rank;
    read(&rank, 1, "rank");
    rec->shape.resize(static_cast<size_t>(rank));
    Index count = 1;
    for (auto& e : rec->shape) {
      e = static_cast<int>(u32());
      count *= e;
    }
    rec->values.resize(static_cast<size_t>(count));
    for (auto& v : rec->values) {
      const std::uint32_t bits = u32();
      std::memcpy(&v, &bits, 4);
    }
    return true;
  }

 private:
  void read(char* dst, size_t n, const char* what) {
    in_.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<size_t>(in_.gcount()) != n) {
      throw std::runtime_error(std::string("checkpoint: truncated (") + what + ")");
    }
  }
  std::uint16_t u16() {
    std::uint8_t b[2];
    read(reinterpret_cast<char*>(b), 2, "u16");
    return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
  }
  std::uint32_t u32() {
    std::uint8_t b[4];
    read(reinterpret_cast<char*>(b), 4, "u32");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) |
           (static_cast<std::uint32_t>(b[3]) << 24);
  }

  std::ifstream in_;
};

}  // namespace

void save_checkpoint(Model<float>& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("checkpoint: cannot open " + path + " for write");
  out.write(kMagic, 8);
  put_u16(out, kVersion);
  out.put(static_cast<char>(model.kind()));

  std::vector<NamedParam<float>> params;
  model.collect_params(params);
  for (auto& p : params) {
    write_record(out, p.name, p.param->value.shape(), p.param->value.data(),
                 p.param->value.size());
  }
  for (auto& p : params) {
    write_record(out, "adam.m:" + p.name, p.param->adam_m.shape(),
                 p.param->adam_m.data(), p.param->adam_m.size());
    write_record(out, "adam.v:" + p.name, p.param->adam_v.shape(),
                 p.param->adam_v.data(), p.param->adam_v.size());
  }
  std::vector<NamedBuffer<float>> buffers;
  model.collect_buffers(buffers);
  for (auto& b : buffers) {
    write_record(out, b.name, b.tensor->shape(), b.tensor->data(),
                 b.tensor->size());
  }
  const float step = params.empty() ? 0.0f
                                    : static_cast<float>(params[0].param->step_count);
  write_record(out, kStepRecord, {1}, &step, 1);
  if (!out) throw std::runtime_error("checkpoint: write failed: " + path);
}

ModelKind peek_checkpoint_kind(const std::string& path) {
  RecordReader reader(path);
  std::uint8_t tag;
  reader.expect_header(&tag);
  if (tag > static_cast<std::uint8_t>(ModelKind::baseline)) {
    throw std::runtime_error("checkpoint: unknown model kind tag " +
                             std::to_string(tag));
  }
  return static_cast<ModelKind>(tag);
}

Model<float> load_checkpoint(const std::string& path, const ModelConfig& cfg,
                             std::optional<ModelKind> expected_kind) {
  RecordReader reader(path);
  std::uint8_t tag;
  reader.expect_header(&tag);
  if (tag > static_cast<std::uint8_t>(ModelKind::baseline)) {
    throw std::runtime_error("checkpoint: unknown model kind tag " +
                             std::to_string(tag));
  }
  const ModelKind kind = static_cast<ModelKind>(tag);
  if (expected_kind && *expected_kind != kind) {
    throw std::runtime_error(std::string("checkpoint: model kind mismatch: file holds ") +
                             to_string(kind) + ", expected " +
                             to_string(*expected_kind));
  }
  Model<float> model = build_model<float>(kind, cfg, /*init_seed=*/0);

  std::map<std::string, Tensor<float>*> slots;
  std::vector<NamedParam<float>> params;
  model.collect_params(params);
  for (auto& p : params) {
    slots[p.name] = &p.param->value;
    slots["adam.m:" + p.name] = &p.param->adam_m;
    slots["adam.v:" + p.name] = &p.param->adam_v;
  }
  std::vector<NamedBuffer<float>> buffers;
  model.collect_buffers(buffers);
  for (auto& b : buffers) slots[b.name] = b.tensor;

  std::map<std::string, bool> filled;
  for (auto& [name, _] : slots) filled[name] = false;
  long step_count = -1;

  std::string name;
  Record rec;
  while (reader.next(&name, &rec)) {
    if (name == kStepRecord) {
      if (rec.values.size() != 1) throw std::runtime_error("checkpoint: bad step record");
      step_count = static_cast<long>(rec.values[0]);
      continue;
    }
    auto it = slots.find(name);
    if (it == slots.end()) {
      throw std::runtime_error("checkpoint: unknown record '" + name +
                               "' for kind " + to_string(kind));
    }
    Tensor<float>& dst = *it->second;
    if (rec.shape != dst.shape()) {
      throw std::runtime_error("checkpoint: shape mismatch for '" + name + "'");
    }
    std::copy(rec.values.begin(), rec.values.end(), dst.data());
    filled[name] = true;
  }
  for (auto& [rec_name, ok] : filled) {
    if (!ok) throw std::runtime_error("checkpoint: missing record '" + rec_name + "'");
  }
  if (step_count < 0) throw std::runtime_error("checkpoint: missing step record");
  for (auto& p : params) p.param->step_count = step_count;
  return model;
}

}  // namespace drivenet
