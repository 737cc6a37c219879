#include "drivenet/run_config.hpp"

#include <fstream>

namespace drivenet {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

int to_int(const std::string& key, const std::string& v) {
  try {
    size_t pos;
    const int x = std::stoi(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw UsageError("config: bad integer for '" + key + "': " + v);
  }
}

double to_double(const std::string& key, const std::string& v) {
  try {
    size_t pos;
    const double x = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw UsageError("config: bad number for '" + key + "': " + v);
  }
}

}  // namespace

void apply_config_entry(RunConfig& cfg, const std::string& key,
                        const std::string& value) {
  if (key == "alpha") cfg.train.alpha = to_double(key, value);
  else if (key == "beta1") cfg.train.beta1 = to_double(key, value);
  else if (key == "beta2") cfg.train.beta2 = to_double(key, value);
  else if (key == "eps") cfg.train.eps = to_double(key, value);
  else if (key == "batch_size") cfg.train.batch_size = to_int(key, value);
  else if (key == "sparse_fraction") cfg.train.sparse_fraction = to_double(key, value);
  else if (key == "epoch_unit_fraction") cfg.train.epoch_unit_fraction = to_double(key, value);
  else if (key == "max_epochs") cfg.train.max_epochs = to_int(key, value);
  else if (key == "seed") cfg.train.seed = static_cast<std::uint64_t>(std::stoull(value));
  else if (key == "input_height") cfg.model.input_height = to_int(key, value);
  else if (key == "input_width") cfg.model.input_width = to_int(key, value);
  else if (key == "channels_per_frame") cfg.model.channels_per_frame = to_int(key, value);
  else if (key == "frames_in") cfg.model.frames_in = to_int(key, value);
  else if (key == "steps_out") cfg.model.steps_out = to_int(key, value);
  else if (key == "embedding_dim") cfg.model.embedding_dim = to_int(key, value);
  else if (key == "lstm_hidden") cfg.model.lstm_hidden = to_int(key, value);
  else if (key == "dropout_p") cfg.model.dropout_p = static_cast<float>(to_double(key, value));
  else if (key == "bn_eps") cfg.model.bn_eps = static_cast<float>(to_double(key, value));
  else if (key == "bn_momentum") cfg.model.bn_momentum = static_cast<float>(to_double(key, value));
  else if (key == "val_runs") cfg.val_runs = to_int(key, value);
  else if (key == "val_frame_fraction") cfg.val_frame_fraction = to_double(key, value);
  else if (key == "track_half_width") cfg.track_half_width = to_double(key, value);
  else if (key == "start_offset_max") cfg.start_offset_max = to_double(key, value);
  else if (key == "start_heading_max") cfg.start_heading_max = to_double(key, value);
  else throw UsageError("config: unknown key '" + key + "'");
}

RunConfig parse_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("config: cannot open " + path);
  RunConfig cfg;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw UsageError("config: line " + std::to_string(line_no) +
                       " is not key = value");
    }
    apply_config_entry(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return cfg;
}

}  // namespace drivenet
