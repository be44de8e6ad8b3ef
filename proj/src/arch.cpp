#include "mfbn/arch.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace mfbn {

using nlohmann::json;

std::string_view to_string(LayerKind kind) {
  return kind == LayerKind::Convolutional ? "conv" : "fc";
}

std::string_view to_string(Activation act) {
  return act == Activation::Linear ? "linear" : "relu";
}

bool ArchSpec::has_batch_norm() const {
  for (const auto& l : layers)
    if (l.batch_norm) return true;
  return false;
}

bool ArchSpec::has_conv() const {
  for (const auto& l : layers)
    if (l.is_conv()) return true;
  return false;
}

std::size_t ArchSpec::channels_before(std::size_t l) const {
  return l <= 1 ? input.channels : layers.at(l - 2).width;
}

std::size_t ArchSpec::sites_before(std::size_t l) const {
  return l <= 1 ? input.sites : layers.at(l - 2).sites();
}

ConfigError::ConfigError(std::string path, const std::string& message)
    : std::runtime_error(path.empty() ? message : path + ": " + message), path_(std::move(path)) {}

std::string format(const Diagnostic& d) {
  if (d.layer == 0) return d.message;
  return "layer " + std::to_string(d.layer) + ": " + d.message;
}

namespace {

// Fan-in the layer must have given what feeds it.
std::size_t expected_fan_in(const ArchSpec& spec, std::size_t l) {
  const LayerSpec& layer = spec.layer(l);
  const std::size_t channels = spec.channels_before(l);
  if (layer.is_conv()) return channels * layer.kernel_sites.value_or(0);
  return channels * spec.sites_before(l);
}

std::string field(std::string_view base, std::string_view key) {
  if (base.empty()) return std::string(key);
  return std::string(base) + "." + std::string(key);
}

void reject_unknown_keys(const json& obj, std::string_view path,
                         std::initializer_list<std::string_view> known) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    const std::string& key = it.key();
    if (!key.empty() && key.front() == '_') continue;
    bool ok = false;
    for (auto k : known) ok = ok || key == k;
    if (!ok) throw ConfigError(field(path, key), "unknown field");
  }
}

const json& require(const json& obj, std::string_view path, const char* key) {
  auto it = obj.find(key);
  if (it == obj.end()) throw ConfigError(field(path, key), "missing required field");
  return *it;
}

std::size_t as_positive_int(const json& v, const std::string& path) {
  if (!v.is_number_integer() || v.get<long long>() <= 0)
    throw ConfigError(path, "expected a positive integer");
  return static_cast<std::size_t>(v.get<long long>());
}

double as_number(const json& v, const std::string& path) {
  if (!v.is_number()) throw ConfigError(path, "expected a number");
  const double x = v.get<double>();
  if (!std::isfinite(x)) throw ConfigError(path, "expected a finite number");
  return x;
}

bool as_bool(const json& v, const std::string& path) {
  if (!v.is_boolean()) throw ConfigError(path, "expected true or false");
  return v.get<bool>();
}

InputSpec parse_input(const json& v) {
  if (!v.is_object()) throw ConfigError("input", "expected an object");
  reject_unknown_keys(v, "input", {"dim", "channels", "sites"});
  InputSpec in;
  if (v.contains("dim")) {
    if (v.contains("channels") || v.contains("sites"))
      throw ConfigError("input", "give either dim or channels/sites, not both");
    in.channels = as_positive_int(v["dim"], "input.dim");
    in.sites = 1;
  } else {
    in.channels = as_positive_int(require(v, "input", "channels"), "input.channels");
    in.sites = as_positive_int(require(v, "input", "sites"), "input.sites");
  }
  return in;
}

InitSpec parse_init(const json& v) {
  if (!v.is_object()) throw ConfigError("init", "expected an object");
  reject_unknown_keys(v, "init", {"sigma_w_sq", "sigma_b_sq", "momentum"});
  InitSpec init;
  if (v.contains("sigma_w_sq")) init.sigma_w_sq = as_number(v["sigma_w_sq"], "init.sigma_w_sq");
  if (v.contains("sigma_b_sq")) init.sigma_b_sq = as_number(v["sigma_b_sq"], "init.sigma_b_sq");
  if (v.contains("momentum")) init.momentum = as_number(v["momentum"], "init.momentum");
  if (init.sigma_w_sq <= 0) throw ConfigError("init.sigma_w_sq", "must be > 0");
  if (init.sigma_b_sq < 0) throw ConfigError("init.sigma_b_sq", "must be >= 0");
  if (init.momentum < 0 || init.momentum >= 1)
    throw ConfigError("init.momentum", "must lie in [0, 1)");
  return init;
}

LayerSpec parse_layer(const json& v, const std::string& path, bool is_last) {
  if (!v.is_object()) throw ConfigError(path, "expected an object");
  reject_unknown_keys(v, path,
                      {"kind", "width", "fan_in", "kernel_sites", "spatial_sites", "batch_norm",
                       "gamma", "beta", "activation"});
  LayerSpec layer;
  const json& kind = require(v, path, "kind");
  if (kind == "fc") {
    layer.kind = LayerKind::FullyConnected;
  } else if (kind == "conv") {
    layer.kind = LayerKind::Convolutional;
  } else {
    throw ConfigError(field(path, "kind"), "expected \"fc\" or \"conv\"");
  }
  layer.width = as_positive_int(require(v, path, "width"), field(path, "width"));
  if (v.contains("fan_in")) layer.fan_in = as_positive_int(v["fan_in"], field(path, "fan_in"));
  if (v.contains("kernel_sites"))
    layer.kernel_sites = as_positive_int(v["kernel_sites"], field(path, "kernel_sites"));
  if (v.contains("spatial_sites"))
    layer.spatial_sites = as_positive_int(v["spatial_sites"], field(path, "spatial_sites"));
  if (v.contains("batch_norm")) layer.batch_norm = as_bool(v["batch_norm"], field(path, "batch_norm"));
  if (v.contains("gamma")) layer.gamma = as_number(v["gamma"], field(path, "gamma"));
  if (v.contains("beta")) layer.beta = as_number(v["beta"], field(path, "beta"));
  layer.activation = is_last ? Activation::Linear : Activation::ReLU;
  if (v.contains("activation")) {
    const json& act = v["activation"];
    if (act == "relu") {
      layer.activation = Activation::ReLU;
    } else if (act == "linear") {
      layer.activation = Activation::Linear;
    } else {
      throw ConfigError(field(path, "activation"), "expected \"relu\" or \"linear\"");
    }
  }
  return layer;
}

}  // namespace

std::vector<Diagnostic> validate_dims(const ArchSpec& spec) {
  std::vector<Diagnostic> out;
  auto add = [&](std::size_t l, std::string msg) { out.push_back({l, std::move(msg)}); };

  if (spec.input.channels == 0 || spec.input.sites == 0) add(0, "input dimensions must be positive");
  if (!(spec.init.sigma_w_sq > 0)) add(0, "sigma_w_sq must be > 0");
  if (!(spec.init.sigma_b_sq >= 0)) add(0, "sigma_b_sq must be >= 0");
  if (!(spec.init.momentum >= 0 && spec.init.momentum < 1)) add(0, "momentum must lie in [0, 1)");
  if (spec.layers.size() < 2) add(0, "at least 2 layers are required (hidden layers plus a linear output)");

  for (std::size_t l = 1; l <= spec.layers.size(); ++l) {
    const LayerSpec& layer = spec.layer(l);
    const bool last = l == spec.layers.size();
    if (layer.width == 0) add(l, "width must be positive");
    if (layer.is_conv()) {
      if (!layer.kernel_sites) add(l, "convolutional layer is missing kernel_sites");
      if (!layer.spatial_sites) add(l, "convolutional layer is missing spatial_sites");
      if (layer.kernel_sites && *layer.kernel_sites == 0) add(l, "kernel_sites must be positive");
      if (layer.spatial_sites && *layer.spatial_sites == 0) add(l, "spatial_sites must be positive");
      if (l > 1 && !spec.layer(l - 1).is_conv())
        add(l, "convolutional layer cannot follow a fully-connected layer");
      const bool input_known = l == 1 || spec.layer(l - 1).spatial_sites.has_value();
      if (input_known && layer.kernel_sites && *layer.kernel_sites > spec.sites_before(l))
        add(l, "kernel_sites exceeds the number of input sites");
    } else {
      if (layer.kernel_sites || layer.spatial_sites)
        add(l, "kernel_sites/spatial_sites are only allowed on convolutional layers");
    }
    if (layer.batch_norm && !(layer.gamma > 0)) add(l, "gamma must be > 0 when batch_norm is on");
    if (last && (layer.batch_norm || layer.activation != Activation::Linear))
      add(l, "final layer must be linear without BatchNorm");

    const std::size_t expected = expected_fan_in(spec, l);
    if (layer.fan_in != expected) {
      std::ostringstream msg;
      msg << "fan_in " << layer.fan_in << " does not match ";
      if (l == 1) {
        msg << "the input (" << expected << ")";
      } else {
        msg << "layer " << l - 1 << " output (width " << spec.layer(l - 1).width;
        if (layer.is_conv()) {
          msg << " x kernel_sites " << layer.kernel_sites.value_or(0);
        } else if (spec.layer(l - 1).is_conv()) {
          msg << " x spatial_sites " << spec.layer(l - 1).sites();
        }
        msg << " = " << expected << ")";
      }
      add(l, msg.str());
    }
  }
  return out;
}

ArchSpec parse_arch(std::string_view text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError("", std::string("malformed JSON: ") + e.what());
  }
  if (!doc.is_object()) throw ConfigError("", "top level must be an object");
  reject_unknown_keys(doc, "", {"input", "init", "layers"});

  ArchSpec spec;
  spec.input = parse_input(require(doc, "", "input"));
  if (doc.contains("init")) spec.init = parse_init(doc["init"]);

  const json& layers = require(doc, "", "layers");
  if (!layers.is_array()) throw ConfigError("layers", "expected an array");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    spec.layers.push_back(
        parse_layer(layers[i], "layers[" + std::to_string(i) + "]", i + 1 == layers.size()));
  }
  for (std::size_t l = 1; l <= spec.layers.size(); ++l) {
    LayerSpec& layer = spec.layers[l - 1];
    if (layer.fan_in == 0) layer.fan_in = expected_fan_in(spec, l);
  }

  const auto diags = validate_dims(spec);
  if (!diags.empty()) {
    const Diagnostic& d = diags.front();
    throw ConfigError(d.layer == 0 ? "" : "layers[" + std::to_string(d.layer - 1) + "]", d.message);
  }
  return spec;
}

ArchSpec load_arch(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("", "cannot open architecture file '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_arch(buf.str());
}

std::string serialize_arch(const ArchSpec& spec) {
  json doc;
  if (spec.input.sites == 1 && !spec.layers.empty() && !spec.layers.front().is_conv()) {
    doc["input"] = {{"dim", spec.input.channels}};
  } else {
    doc["input"] = {{"channels", spec.input.channels}, {"sites", spec.input.sites}};
  }
  doc["init"] = {{"sigma_w_sq", spec.init.sigma_w_sq},
                 {"sigma_b_sq", spec.init.sigma_b_sq},
                 {"momentum", spec.init.momentum}};
  json layers = json::array();
  for (const auto& l : spec.layers) {
    json j = {{"kind", to_string(l.kind)},
              {"width", l.width},
              {"fan_in", l.fan_in},
              {"batch_norm", l.batch_norm},
              {"gamma", l.gamma},
              {"beta", l.beta},
              {"activation", to_string(l.activation)}};
    if (l.kernel_sites) j["kernel_sites"] = *l.kernel_sites;
    if (l.spatial_sites) j["spatial_sites"] = *l.spatial_sites;
    layers.push_back(std::move(j));
  }
  doc["layers"] = std::move(layers);
  return doc.dump(2) + "\n";
}

std::size_t conv_output_sites(std::size_t input_sites, std::size_t kernel_sites, std::size_t stride) {
  const auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(input_sites))));
  const auto k = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(kernel_sites))));
  if (side * side != input_sites || k * k != kernel_sites)
    throw std::invalid_argument("conv_output_sites: sites must be perfect squares");
  if (stride == 0 || k > side) throw std::invalid_argument("conv_output_sites: kernel does not fit");
  const std::size_t out = (side - k) / stride + 1;
  return out * out;
}

ArchSpec with_gamma(ArchSpec spec, double gamma) {
  for (auto& l : spec.layers)
    if (l.batch_norm) l.gamma = gamma;
  return spec;
}

ArchSpec without_batch_norm(ArchSpec spec) {
  for (auto& l : spec.layers) l.batch_norm = false;
  return spec;
}

}  // namespace mfbn
