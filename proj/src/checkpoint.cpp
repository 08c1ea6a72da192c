#include "rcalign/checkpoint.hpp"

#include <map>

#include "rcalign/binary_io.hpp"
#include "rcalign/error.hpp"

namespace rcalign {

namespace {

constexpr char kMagic[4] = {'R', 'C', 'A', 'T'};
using ojson = nlohmann::ordered_json;

struct Entry {
  Shape shape;
  std::size_t offset;
};

struct TableWriter {
  ojson table = ojson::object();
  std::string data;

  void add(const std::string& name, const Tensor& t) {
    table[name] = ojson{{"shape", t.shape()}, {"dtype", "f64"}, {"offset", data.size()}};
    binio::put_f64s(data, t.data());
  }
};

Tensor read_tensor(std::string_view data, const std::string& name, const Entry& e) {
  Tensor t(e.shape);
  const std::size_t bytes = t.size() * sizeof(double);
  if (e.offset > data.size() || data.size() - e.offset < bytes) {
    throw TruncatedFileError("checkpoint truncated: tensor '" + name + "' needs bytes [" +
                             std::to_string(e.offset) + ", " + std::to_string(e.offset + bytes) +
                             ") of a " + std::to_string(data.size()) + "-byte data block");
  }
  binio::Reader r(data.substr(e.offset, bytes));
  r.get_f64s(t.data());
  return t;
}

const Entry& find(const std::map<std::string, Entry>& entries, const std::string& name) {
  auto it = entries.find(name);
  if (it == entries.end()) throw ShapeMismatchError("checkpoint is missing tensor '" + name + "'");
  return it->second;
}

}  // namespace

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  const ParameterStore& params = ckpt.model.params();
  TableWriter w;
  for (std::size_t i = 0; i < params.size(); ++i) w.add(params.name(i), params.at(i));

  ojson train_state = nullptr;
  if (ckpt.training) {
    const TrainingState& ts = *ckpt.training;
    if (ts.optimizer.m.size() != params.size() || ts.optimizer.v.size() != params.size()) {
      throw UsageError("save_checkpoint: optimizer state does not match the model's parameters");
    }
    for (std::size_t i = 0; i < params.size(); ++i) w.add("adam.m/" + params.name(i), ts.optimizer.m[i]);
    for (std::size_t i = 0; i < params.size(); ++i) w.add("adam.v/" + params.name(i), ts.optimizer.v[i]);
    w.add("train.losses", Tensor({ts.losses.size()}, ts.losses));
    train_state = ojson{{"step", ts.optimizer.step}, {"train_config", ojson(to_json(ts.config))}};
  }

  ojson header{{"format", "rc-align-checkpoint"},
               {"format_version", kCheckpointVersion},
               {"model_config", ojson(to_json(ckpt.model.config()))},
               {"tensors", std::move(w.table)},
               {"train_state", std::move(train_state)},
               {"metadata", ojson(ckpt.metadata)}};
  const std::string header_text = header.dump();
  std::string out(kMagic, 4);
  binio::put<std::uint32_t>(out, kCheckpointVersion);
  binio::put<std::uint64_t>(out, header_text.size());
  out += header_text;
  out += w.data;
  return out;
}

Checkpoint deserialize_checkpoint(const std::string& bytes, const std::optional<ModelConfig>& expected) {
  binio::Reader r(bytes);
  if (r.take(4) != std::string_view(kMagic, 4)) throw MagicError("not a checkpoint file (bad magic)");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw VersionError("checkpoint version " + std::to_string(version) + " unsupported (expected " +
                       std::to_string(kCheckpointVersion) + ")");
  }
  const auto header_len = r.get<std::uint64_t>();
  const std::string_view header_text = r.take(header_len);
  const std::string_view data = std::string_view(bytes).substr(r.position());

  nlohmann::json header;
  ModelConfig embedded;
  std::map<std::string, Entry> entries;
  std::optional<std::size_t> train_step;
  std::optional<TrainConfig> train_config;
  try {
    header = nlohmann::json::parse(header_text);
    embedded = model_config_from_json(header.at("model_config"));
    for (const auto& [name, e] : header.at("tensors").items()) {
      if (e.at("dtype").get<std::string>() != "f64") {
        throw FormatError("tensor '" + name + "' has unsupported dtype " + e.at("dtype").dump());
      }
      entries.emplace(name, Entry{e.at("shape").get<Shape>(), e.at("offset").get<std::size_t>()});
    }
    const auto& ts = header.at("train_state");
    if (!ts.is_null()) {
      train_step = ts.at("step").get<std::size_t>();
      train_config = train_config_from_json(ts.at("train_config"));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint header: ") + e.what());
  }

  Checkpoint ckpt{Model::empty(expected ? *expected : embedded), std::nullopt,
                  header.value("metadata", nlohmann::json::object())};
  ParameterStore& params = ckpt.model.params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::string& name = params.name(i);
    const Entry& e = find(entries, name);
    if (e.shape != params.at(i).shape()) {
      throw ShapeMismatchError("tensor '" + name + "': checkpoint has shape " + shape_str(e.shape) +
                               ", requested config expects " + shape_str(params.at(i).shape()));
    }
    params.at(i) = read_tensor(data, name, e);
  }
  if (train_step) {
    TrainingState ts;
    ts.config = *train_config;
    ts.optimizer.step = *train_step;
    for (std::size_t i = 0; i < params.size(); ++i) {
      for (const char* prefix : {"adam.m/", "adam.v/"}) {
        const std::string name = prefix + params.name(i);
        const Entry& e = find(entries, name);
        if (e.shape != params.at(i).shape()) {
          throw ShapeMismatchError("tensor '" + name + "': checkpoint has shape " + shape_str(e.shape) +
                                   ", expected " + shape_str(params.at(i).shape()));
        }
        (prefix[5] == 'm' ? ts.optimizer.m : ts.optimizer.v).push_back(read_tensor(data, name, e));
      }
    }
    const Tensor losses = read_tensor(data, "train.losses", find(entries, "train.losses"));
    ts.losses.assign(losses.data().begin(), losses.data().end());
    ckpt.training = std::move(ts);
  }
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  binio::write_file_atomic(path, serialize_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::string& path, const std::optional<ModelConfig>& expected) {
  return deserialize_checkpoint(binio::read_file(path), expected);
}

}  // namespace rcalign
