#pragma once

#include <cstring>
#include <fstream>
#include <string>

#include <json.hpp>

#include "cineseg/model.hpp"
#include "cineseg/optimizer.hpp"

namespace cineseg {

// Single-file archive: 8-byte magic, u64 header length, JSON header (model
// config + training state + tensor directory), then raw little-endian f64
// payloads in directory order. Doubles round-trip exactly, so
// save -> load -> save is bit-identical.
constexpr char kCheckpointMagic[8] = {'C', 'S', 'E', 'G', 'C', 'K', 'P', '1'};

struct CheckpointData {
  ModelConfig model_config;
  NamedTensors params;
  NamedTensors adam_m, adam_v;
  int64_t adam_t = 0;
  int64_t step = 0;
  int epoch = 0;
  double best_val_dice = -1.0;
  int best_epoch = -1;
  int stale_epochs = 0;
  uint64_t seed = 0;
  nlohmann::json train_config;  // effective config snapshot, optional
};

inline void save_checkpoint(const CheckpointData& ck, const std::string& path) {
  nlohmann::json header;
  header["model_config"] = ck.model_config;
  header["train_state"] = {{"adam_t", ck.adam_t},
                           {"step", ck.step},
                           {"epoch", ck.epoch},
                           {"best_val_dice", ck.best_val_dice},
                           {"best_epoch", ck.best_epoch},
                           {"stale_epochs", ck.stale_epochs},
                           {"seed", ck.seed}};
  if (!ck.train_config.is_null()) header["train_config"] = ck.train_config;

  nlohmann::json dir = nlohmann::json::array();
  int64_t offset = 0;
  auto add_group = [&](const char* group, const NamedTensors& t) {
    for (size_t i = 0; i < t.size(); ++i) {
      dir.push_back({{"group", group},
                     {"name", t.names[i]},
                     {"shape", t.tensors[i].shape},
                     {"offset", offset}});
      offset += t.tensors[i].numel();
    }
  };
  add_group("param", ck.params);
  add_group("adam.m", ck.adam_m);
  add_group("adam.v", ck.adam_v);
  header["tensors"] = dir;
  header["payload_doubles"] = offset;

  std::string head = header.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require_data(out.good(), "cannot write checkpoint: " + path);
  out.write(kCheckpointMagic, 8);
  uint64_t hlen = head.size();
  out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  out.write(head.data(), static_cast<std::streamsize>(head.size()));
  auto write_group = [&](const NamedTensors& t) {
    for (const auto& tensor : t.tensors)
      out.write(reinterpret_cast<const char*>(tensor.data.data()),
                static_cast<std::streamsize>(tensor.data.size() * sizeof(double)));
  };
  write_group(ck.params);
  write_group(ck.adam_m);
  write_group(ck.adam_v);
  require_data(out.good(), "checkpoint write failed: " + path);
}

inline CheckpointData load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require_data(in.good(), "cannot open checkpoint: " + path);
  char magic[8];
  in.read(magic, 8);
  require_data(in.good() && std::memcmp(magic, kCheckpointMagic, 8) == 0,
               "not a checkpoint file: " + path);
  uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  std::string head(hlen, '\0');
  in.read(head.data(), static_cast<std::streamsize>(hlen));
  require_data(in.good(), "truncated checkpoint header: " + path);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(head);
  } catch (const std::exception& e) {
    throw DataError(std::string("unparseable checkpoint header: ") + e.what());
  }

  CheckpointData ck;
  ck.model_config = header.at("model_config").get<ModelConfig>();
  const auto& ts = header.at("train_state");
  ck.adam_t = ts.value("adam_t", 0LL);
  ck.step = ts.value("step", 0LL);
  ck.epoch = ts.value("epoch", 0);
  ck.best_val_dice = ts.value("best_val_dice", -1.0);
  ck.best_epoch = ts.value("best_epoch", -1);
  ck.stale_epochs = ts.value("stale_epochs", 0);
  ck.seed = ts.value("seed", 0ULL);
  if (header.contains("train_config")) ck.train_config = header["train_config"];

  ModelParameters proto = ModelParameters::build(ck.model_config);
  ck.params = proto.params.zeros_like();
  ck.adam_m = proto.params.zeros_like();
  ck.adam_v = proto.params.zeros_like();

  std::streamoff payload_start = 8 + static_cast<std::streamoff>(sizeof(uint64_t)) +
                                 static_cast<std::streamoff>(hlen);
  for (const auto& entry : header.at("tensors")) {
    std::string group = entry.at("group").get<std::string>();
    std::string name = entry.at("name").get<std::string>();
    NamedTensors* target = group == "param" ? &ck.params
                           : group == "adam.m" ? &ck.adam_m
                           : group == "adam.v" ? &ck.adam_v
                                               : nullptr;
    require_data(target != nullptr, "unknown tensor group in checkpoint: " + group);
    require_data(target->has(name), "checkpoint tensor not in model: " + name);
    Tensor& t = target->get(name);
    auto shape = entry.at("shape").get<std::vector<int64_t>>();
    require_data(shape == t.shape, "checkpoint shape mismatch for " + name);
    in.seekg(payload_start + entry.at("offset").get<int64_t>() *
                                 static_cast<std::streamoff>(sizeof(double)));
    in.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    require_data(in.good(), "truncated checkpoint payload at " + name);
  }
  return ck;
}

}  // namespace cineseg
