// SPDX-License-Identifier: Apache-2.0
#include "kdlsq/checkpoint.hpp"

#include <fstream>
#include <stdexcept>

namespace kdlsq {

using nlohmann::json;

json model_config_to_json(const ModelConfig& c) {
  return json{
      {"layers", c.layers},
      {"hidden", c.hidden},
      {"heads", c.heads},
      {"ffn", c.ffn},
      {"vocab", c.vocab},
      {"max_seq", c.max_seq},
      {"num_classes", c.num_classes},
      {"segments", c.segments},
      {"bits", c.bits_label()},
      {"attention_scaling", c.attention_scaling == AttentionScaling::kHiddenSize ? "hidden" : "head"},
  };
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  c.layers = j.value("layers", c.layers);
  c.hidden = j.value("hidden", c.hidden);
  c.heads = j.value("heads", c.heads);
  c.ffn = j.value("ffn", c.ffn);
  c.vocab = j.value("vocab", c.vocab);
  c.max_seq = j.value("max_seq", c.max_seq);
  c.num_classes = j.value("num_classes", c.num_classes);
  c.segments = j.value("segments", c.segments);
  if (j.contains("bits")) {
    auto [w, e, a] = parse_bits(j.at("bits").get<std::string>());
    c.set_bits(w, e, a);
  }
  if (j.contains("attention_scaling")) {
    const auto mode = j.at("attention_scaling").get<std::string>();
    if (mode == "hidden") {
      c.attention_scaling = AttentionScaling::kHiddenSize;
    } else if (mode == "head") {
      c.attention_scaling = AttentionScaling::kHeadSize;
    } else {
      throw std::invalid_argument("attention_scaling must be 'hidden' or 'head'");
    }
  }
  c.validate();
  return c;
}

json checkpoint_to_json(const ModelState& model) {
  json params = json::object();
  for (const auto& [name, t] : model.named_parameters()) {
    json entry{{"shape", t->shape()}, {"values", t->values()}};
    for (const auto& s : model.scales()) {
      if (s.site_id == name && s.initialized) entry["scale"] = s.get();
    }
    params[name] = std::move(entry);
  }
  json activation = json::object();
  for (const auto& s : model.scales()) {
    if (s.kind == SiteKind::kActivation && s.initialized) activation[s.site_id] = s.get();
  }
  return json{
      {"format", kCheckpointFormat},
      {"version", kCheckpointVersion},
      {"config", model_config_to_json(model.config())},
      {"parameters", std::move(params)},
      {"activation_scales", std::move(activation)},
  };
}

ModelState checkpoint_from_json(const json& j) {
  if (j.value("format", std::string{}) != kCheckpointFormat) {
    throw std::runtime_error("checkpoint: not a kdlsq checkpoint");
  }
  if (j.value("version", 0) != kCheckpointVersion) {
    throw std::runtime_error("checkpoint: unsupported version " + j.value("version", json(nullptr)).dump());
  }
  ModelState model(model_config_from_json(j.at("config")));
  const json& params = j.at("parameters");
  for (auto& [name, t] : model.named_parameters()) {
    if (!params.contains(name)) throw std::runtime_error("checkpoint: missing parameter " + name);
    const json& entry = params.at(name);
    const auto shape = entry.at("shape").get<Shape>();
    if (shape != t->shape()) {
      throw std::runtime_error("checkpoint: parameter " + name + " has shape " + shape_str(shape) + ", expected " +
                               shape_str(t->shape()));
    }
    *t = Tensor(shape, entry.at("values").get<std::vector<double>>());
    if (entry.contains("scale")) model.scale(name).set(entry.at("scale").get<double>());
  }
  if (j.contains("activation_scales")) {
    for (const auto& [site, value] : j.at("activation_scales").items()) model.scale(site).set(value.get<double>());
  }
  return model;
}

void save_checkpoint(const ModelState& model, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  out << checkpoint_to_json(model).dump() << '\n';
  if (!out) throw std::runtime_error("failed writing checkpoint " + path.string());
}

ModelState load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read checkpoint " + path.string());
  return checkpoint_from_json(json::parse(in));
}

}  // namespace kdlsq
