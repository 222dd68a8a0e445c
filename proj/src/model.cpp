#include "vitprune/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "vitprune/json_io.hpp"
#include "vitprune/random.hpp"

namespace vp {

namespace {

constexpr char kMagic[8] = {'V', 'P', 'C', 'K', 'P', 'T', '0', '1'};

const std::vector<std::pair<Component, const char*>>& component_names() {
  static const std::vector<std::pair<Component, const char*>> names = {
      {Component::kPatchEmbed, "patch_embed"}, {Component::kPosEmbed, "pos_embed"},
      {Component::kCls, "cls"},                {Component::kLn1, "ln1"},
      {Component::kQkv, "qkv"},                {Component::kAttnOut, "attn_out"},
      {Component::kLn2, "ln2"},                {Component::kMlpFc1, "mlp_fc1"},
      {Component::kMlpFc2, "mlp_fc2"},         {Component::kFinalLn, "final_ln"},
      {Component::kHead, "head"},
  };
  return names;
}

Tensor affine(const Tensor& x, const Tensor& gain, const Tensor& bias) { return add(mul(x, gain), bias); }

template <typename T>
void put_le(std::string& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T get_le(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw std::runtime_error("checkpoint: truncated archive");
  char buf[sizeof(T)];
  std::memcpy(buf, in.data() + pos, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
  pos += sizeof(T);
  T value;
  std::memcpy(&value, buf, sizeof(T));
  return value;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

ModelConfig ModelConfig::uniform(std::int64_t image_size, std::int64_t channels, std::int64_t patch_size,
                                 std::int64_t embed_dim, std::int64_t num_layers, std::int64_t heads,
                                 std::int64_t head_dim, std::int64_t mlp_hidden, std::int64_t num_classes,
                                 Pooling pooling, bool use_cls_token) {
  ModelConfig c;
  c.image_size = image_size;
  c.channels = channels;
  c.patch_size = patch_size;
  c.embed_dim = embed_dim;
  c.num_layers = num_layers;
  c.num_heads.assign(std::max<std::int64_t>(num_layers, 0), heads);
  c.head_dim = head_dim;
  c.mlp_hidden.assign(std::max<std::int64_t>(num_layers, 0), mlp_hidden);
  c.num_classes = num_classes;
  c.pooling = pooling;
  c.use_cls_token = use_cls_token;
  return c;
}

ModelConfig ModelConfig::vit_base() { return uniform(224, 3, 16, 768, 12, 12, 64, 3072, 1000); }

ModelConfig ModelConfig::toy() { return uniform(32, 3, 8, 64, 2, 4, 16, 128, 7); }

void ModelConfig::validate() const {
  std::vector<std::string> errors;
  if (image_size <= 0) errors.push_back("image_size must be positive");
  if (channels <= 0) errors.push_back("channels must be positive");
  if (patch_size <= 0) {
    errors.push_back("patch_size must be positive");
  } else if (image_size > 0 && image_size % patch_size != 0) {
    errors.push_back("image_size " + std::to_string(image_size) + " not divisible by patch_size " +
                     std::to_string(patch_size));
  }
  if (embed_dim <= 0) errors.push_back("embed_dim must be positive");
  if (num_layers <= 0) errors.push_back("num_layers must be positive");
  if (head_dim <= 0) errors.push_back("head_dim must be positive");
  if (num_classes <= 0) errors.push_back("num_classes must be positive");
  if (static_cast<std::int64_t>(num_heads.size()) != num_layers) {
    errors.push_back("num_heads has " + std::to_string(num_heads.size()) + " entries for " +
                     std::to_string(num_layers) + " layers");
  }
  for (std::size_t l = 0; l < num_heads.size(); ++l) {
    if (num_heads[l] <= 0) errors.push_back("layer " + std::to_string(l) + " has zero heads");
  }
  if (static_cast<std::int64_t>(mlp_hidden.size()) != num_layers) {
    errors.push_back("mlp_hidden has " + std::to_string(mlp_hidden.size()) + " entries for " +
                     std::to_string(num_layers) + " layers");
  }
  for (std::size_t l = 0; l < mlp_hidden.size(); ++l) {
    if (mlp_hidden[l] <= 0) errors.push_back("layer " + std::to_string(l) + " has zero mlp channels");
  }
  if (pooling == Pooling::kCls && !use_cls_token) errors.push_back("cls pooling requires use_cls_token");
  if (!errors.empty()) {
    std::string msg = "invalid model config:";
    for (const auto& e : errors) msg += "\n  - " + e;
    throw std::invalid_argument(msg);
  }
}

std::string to_string(Component c) {
  for (const auto& [comp, name] : component_names()) {
    if (comp == c) return name;
  }
  return "unknown";
}

std::optional<Component> component_from_string(const std::string& s) {
  for (const auto& [comp, name] : component_names()) {
    if (s == name) return comp;
  }
  return std::nullopt;
}

std::string to_string(Pooling p) { return p == Pooling::kCls ? "cls" : "mean"; }

Pooling pooling_from_string(const std::string& s) {
  if (s == "cls") return Pooling::kCls;
  if (s == "mean") return Pooling::kMean;
  throw std::invalid_argument("unknown pooling '" + s + "' (expected cls|mean)");
}

std::string ParamKey::str() const {
  std::string s = layer >= 0 ? "blocks." + std::to_string(layer) + "." : std::string{};
  return s + to_string(component) + "." + name;
}

ParamKey ParamKey::parse(const std::string& s) {
  ParamKey key;
  std::string rest = s;
  if (rest.rfind("blocks.", 0) == 0) {
    rest = rest.substr(7);
    const auto dot = rest.find('.');
    if (dot == std::string::npos) throw std::invalid_argument("bad parameter key '" + s + "'");
    key.layer = std::stoi(rest.substr(0, dot));
    rest = rest.substr(dot + 1);
  }
  const auto dot = rest.find('.');
  if (dot == std::string::npos) throw std::invalid_argument("bad parameter key '" + s + "'");
  auto comp = component_from_string(rest.substr(0, dot));
  if (!comp) throw std::invalid_argument("unknown component in parameter key '" + s + "'");
  key.component = *comp;
  key.name = rest.substr(dot + 1);
  return key;
}

// ---------------------------------------------------------------------------
// Model

TransformerModel::TransformerModel(ModelConfig config, ParamStore params)
    : config_(std::move(config)), params_(std::move(params)) {
  config_.validate();
  check_consistency();
}

const Tensor& TransformerModel::param(const ParamKey& key) const {
  auto it = params_.find(key);
  if (it == params_.end()) throw std::out_of_range("missing parameter " + key.str());
  return it->second;
}

Tensor& TransformerModel::param(const ParamKey& key) {
  auto it = params_.find(key);
  if (it == params_.end()) throw std::out_of_range("missing parameter " + key.str());
  return it->second;
}

std::map<ParamKey, Shape> TransformerModel::expected_shapes(const ModelConfig& c) {
  std::map<ParamKey, Shape> s;
  const auto d = c.embed_dim;
  s[{-1, Component::kPatchEmbed, "weight"}] = {d, c.patch_dim()};
  s[{-1, Component::kPatchEmbed, "bias"}] = {d};
  s[{-1, Component::kPosEmbed, "value"}] = {c.num_tokens(), d};
  if (c.use_cls_token) s[{-1, Component::kCls, "value"}] = {1, d};
  for (int l = 0; l < static_cast<int>(c.num_layers); ++l) {
    const auto inner = c.num_heads[l] * c.head_dim;
    const auto hidden = c.mlp_hidden[l];
    s[{l, Component::kLn1, "weight"}] = {d};
    s[{l, Component::kLn1, "bias"}] = {d};
    s[{l, Component::kQkv, "weight"}] = {3 * inner, d};
    s[{l, Component::kQkv, "bias"}] = {3 * inner};
    s[{l, Component::kAttnOut, "weight"}] = {d, inner};
    s[{l, Component::kAttnOut, "bias"}] = {d};
    s[{l, Component::kLn2, "weight"}] = {d};
    s[{l, Component::kLn2, "bias"}] = {d};
    s[{l, Component::kMlpFc1, "weight"}] = {hidden, d};
    s[{l, Component::kMlpFc1, "bias"}] = {hidden};
    s[{l, Component::kMlpFc2, "weight"}] = {d, hidden};
    s[{l, Component::kMlpFc2, "bias"}] = {d};
  }
  s[{-1, Component::kFinalLn, "weight"}] = {d};
  s[{-1, Component::kFinalLn, "bias"}] = {d};
  s[{-1, Component::kHead, "weight"}] = {c.num_classes, d};
  s[{-1, Component::kHead, "bias"}] = {c.num_classes};
  return s;
}

void TransformerModel::check_consistency() const {
  const auto expected = expected_shapes(config_);
  for (const auto& [key, shape] : expected) {
    auto it = params_.find(key);
    if (it == params_.end()) throw std::invalid_argument("model: missing parameter " + key.str());
    if (it->second.shape() != shape) {
      throw ShapeError("model: parameter " + key.str() + " has shape " + shape_str(it->second.shape()) +
                       ", expected " + shape_str(shape));
    }
  }
  for (const auto& [key, t] : params_) {
    if (!expected.count(key)) throw std::invalid_argument("model: unknown parameter " + key.str());
  }
}

Tensor patchify(const Tensor& images, std::int64_t p) {
  const auto& s = images.shape();
  if (s.size() != 4 || s[2] != s[3] || p <= 0 || s[2] % p != 0) {
    throw ShapeError("patchify: expected [B,C,S,S] with S divisible by " + std::to_string(p) + ", got " +
                     shape_str(s));
  }
  const auto b = s[0], c = s[1], size = s[2], g = size / p;
  // [B,C,g,p,g,p] -> [B,g,g,C,p,p]
  auto t = reshape(images, {b, c, g, p, g, p});
  t = permute(t, {0, 2, 4, 1, 3, 5});
  return reshape(t, {b, g * g, c * p * p});
}

Tensor TransformerModel::forward(const Tensor& images, AttentionRecord* record) const {
  const auto& c = config_;
  const auto& s = images.shape();
  if (s.size() != 4 || s[1] != c.channels || s[2] != c.image_size || s[3] != c.image_size) {
    throw ShapeError("forward: expected images [B," + std::to_string(c.channels) + "," +
                     std::to_string(c.image_size) + "," + std::to_string(c.image_size) + "], got " + shape_str(s));
  }
  const auto batch = s[0];
  const auto d = c.embed_dim;
  const auto n = c.num_tokens();
  const auto dh = c.head_dim;
  const double attn_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  if (record) record->layers.clear();

  auto g = [&](int layer, Component comp, const char* name) -> const Tensor& {
    return param({layer, comp, name});
  };

  Tensor x = linear(patchify(images, c.patch_size), g(-1, Component::kPatchEmbed, "weight"),
                    g(-1, Component::kPatchEmbed, "bias"));
  if (c.use_cls_token) {
    Tensor cls = add(Tensor::zeros({batch, 1, d}), reshape(g(-1, Component::kCls, "value"), {1, 1, d}));
    x = concat({cls, x}, 1);
  }
  x = add(x, g(-1, Component::kPosEmbed, "value"));

  for (int l = 0; l < static_cast<int>(c.num_layers); ++l) {
    const auto heads = c.num_heads[l];
    Tensor h = affine(layer_norm(x, -1), g(l, Component::kLn1, "weight"), g(l, Component::kLn1, "bias"));
    Tensor qkv = linear(h, g(l, Component::kQkv, "weight"), g(l, Component::kQkv, "bias"));
    qkv = permute(reshape(qkv, {batch, n, 3, heads, dh}), {2, 0, 3, 1, 4});  // [3,B,H,N,dh]
    Tensor q = reshape(slice(qkv, 0, 0, 1), {batch * heads, n, dh});
    Tensor k = reshape(slice(qkv, 0, 1, 1), {batch * heads, n, dh});
    Tensor v = reshape(slice(qkv, 0, 2, 1), {batch * heads, n, dh});
    Tensor attn = softmax(scale(matmul(q, transpose(k, 1, 2)), attn_scale), -1);
    if (record) record->layers.push_back(reshape(attn.detach(), {batch, heads, n, n}));
    Tensor ctx = matmul(attn, v);  // [B*H,N,dh]
    ctx = reshape(permute(reshape(ctx, {batch, heads, n, dh}), {0, 2, 1, 3}), {batch, n, heads * dh});
    x = add(x, linear(ctx, g(l, Component::kAttnOut, "weight"), g(l, Component::kAttnOut, "bias")));

    Tensor h2 = affine(layer_norm(x, -1), g(l, Component::kLn2, "weight"), g(l, Component::kLn2, "bias"));
    Tensor f = gelu(linear(h2, g(l, Component::kMlpFc1, "weight"), g(l, Component::kMlpFc1, "bias")));
    x = add(x, linear(f, g(l, Component::kMlpFc2, "weight"), g(l, Component::kMlpFc2, "bias")));
  }
  x = affine(layer_norm(x, -1), g(-1, Component::kFinalLn, "weight"), g(-1, Component::kFinalLn, "bias"));

  Tensor pooled;
  if (c.pooling == Pooling::kCls) {
    pooled = reshape(slice(x, 1, 0, 1), {batch, d});
  } else {
    const std::int64_t first = c.use_cls_token ? 1 : 0;
    pooled = mean(slice(x, 1, first, c.num_patches()), 1);
  }
  return linear(pooled, g(-1, Component::kHead, "weight"), g(-1, Component::kHead, "bias"));
}

TransformerModel TransformerModel::clone() const {
  ParamStore copy;
  for (const auto& [key, t] : params_) {
    auto c = Tensor::from_data(t.shape(), std::vector<double>(t.data().begin(), t.data().end()), t.requires_grad());
    copy.emplace(key, std::move(c));
  }
  TransformerModel m;
  m.config_ = config_;
  m.params_ = std::move(copy);
  return m;
}

std::string TransformerModel::serialize() const {
  std::string out(kMagic, kMagic + 8);
  const std::string cfg = Json(config_).dump();
  put_le<std::uint64_t>(out, cfg.size());
  out += cfg;
  put_le<std::uint64_t>(out, params_.size());
  for (const auto& [key, t] : params_) {
    const std::string name = key.str();
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape()) put_le<std::int64_t>(out, e);
    for (double v : t.data()) put_le<double>(out, v);
  }
  return out;
}

TransformerModel TransformerModel::deserialize(const std::string& bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic, 8) != 0) {
    throw std::runtime_error("checkpoint: bad magic (not a model archive)");
  }
  std::size_t pos = 8;
  const auto cfg_len = get_le<std::uint64_t>(bytes, pos);
  if (pos + cfg_len > bytes.size()) throw std::runtime_error("checkpoint: truncated config");
  ModelConfig config = model_config_from_json(Json::parse(bytes.substr(pos, cfg_len)));
  pos += cfg_len;
  const auto count = get_le<std::uint64_t>(bytes, pos);
  ParamStore params;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name_len = get_le<std::uint32_t>(bytes, pos);
    if (pos + name_len > bytes.size()) throw std::runtime_error("checkpoint: truncated name");
    const std::string name = bytes.substr(pos, name_len);
    pos += name_len;
    const auto rank = get_le<std::uint32_t>(bytes, pos);
    Shape shape(rank);
    for (auto& e : shape) e = get_le<std::int64_t>(bytes, pos);
    std::vector<double> data(numel_of(shape));
    for (auto& v : data) v = get_le<double>(bytes, pos);
    params.emplace(ParamKey::parse(name), Tensor::from_data(std::move(shape), std::move(data)));
  }
  if (pos != bytes.size()) throw std::runtime_error("checkpoint: trailing bytes");
  return TransformerModel(std::move(config), std::move(params));
}

void TransformerModel::save(const std::filesystem::path& path) const {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write checkpoint " + path.string());
  const auto bytes = serialize();
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("failed writing checkpoint " + path.string());
}

TransformerModel TransformerModel::load(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return deserialize(ss.str());
}

TransformerModel init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  for (std::size_t l = 0; l < config.num_heads.size(); ++l) {
    if (config.num_heads[l] * config.head_dim != config.embed_dim) {
      throw std::invalid_argument("init_model: heads*head_dim must equal embed_dim at initialization (layer " +
                                  std::to_string(l) + ")");
    }
  }
  Rng rng(seed);
  ParamStore params;
  for (const auto& [key, shape] : TransformerModel::expected_shapes(config)) {
    std::vector<double> data(numel_of(shape), 0.0);
    const bool is_norm = key.component == Component::kLn1 || key.component == Component::kLn2 ||
                         key.component == Component::kFinalLn;
    if (is_norm && key.name == "weight") {
      std::fill(data.begin(), data.end(), 1.0);
    } else if (!is_norm && key.name != "bias") {
      for (auto& v : data) v = rng.truncated_normal(0.02);
    }
    params.emplace(key, Tensor::from_data(shape, std::move(data)));
  }
  return TransformerModel(config, std::move(params));
}

std::int64_t param_count(const ModelConfig& config) {
  config.validate();
  std::int64_t total = 0;
  for (const auto& [key, shape] : TransformerModel::expected_shapes(config)) total += numel_of(shape);
  return total;
}

std::int64_t param_count(const TransformerModel& model) {
  std::int64_t total = 0;
  for (const auto& [key, t] : model.params()) total += t.numel();
  return total;
}

std::int64_t macs_count(const ModelConfig& c) {
  c.validate();
  const auto n = c.num_tokens();
  const auto d = c.embed_dim;
  std::int64_t macs = c.num_patches() * c.patch_dim() * d;
  for (int l = 0; l < static_cast<int>(c.num_layers); ++l) {
    const auto inner = c.num_heads[l] * c.head_dim;
    macs += n * d * 3 * inner;        // qkv projection
    macs += n * n * inner;            // q k^T
    macs += n * n * inner;            // attn v
    macs += n * inner * d;            // output projection
    macs += 2 * n * d * c.mlp_hidden[l];  // fc1 + fc2
  }
  macs += d * c.num_classes;
  return macs;
}

std::int64_t macs_count(const TransformerModel& model) { return macs_count(model.config()); }

// ---------------------------------------------------------------------------
// JSON

namespace {
std::vector<std::int64_t> widths_from_json(const Json& j, std::int64_t layers, const char* field) {
  if (j.is_number_integer()) return std::vector<std::int64_t>(std::max<std::int64_t>(layers, 0), j.get<std::int64_t>());
  if (j.is_array()) return j.get<std::vector<std::int64_t>>();
  throw std::invalid_argument(std::string("model.") + field + " must be an integer or per-layer array");
}
}  // namespace

void to_json(Json& j, const ModelConfig& c) {
  j = Json{{"image_size", c.image_size}, {"channels", c.channels},     {"patch_size", c.patch_size},
           {"embed_dim", c.embed_dim},   {"num_layers", c.num_layers}, {"num_heads", c.num_heads},
           {"head_dim", c.head_dim},     {"mlp_hidden", c.mlp_hidden}, {"num_classes", c.num_classes},
           {"pooling", to_string(c.pooling)}, {"use_cls_token", c.use_cls_token}};
}

void from_json(const Json& j, ModelConfig& c) {
  ModelConfig d = ModelConfig::toy();
  c.image_size = j.value("image_size", d.image_size);
  c.channels = j.value("channels", d.channels);
  c.patch_size = j.value("patch_size", d.patch_size);
  c.embed_dim = j.value("embed_dim", d.embed_dim);
  c.num_layers = j.value("num_layers", d.num_layers);
  c.head_dim = j.value("head_dim", d.head_dim);
  c.num_heads = j.contains("num_heads") ? widths_from_json(j["num_heads"], c.num_layers, "num_heads")
                                        : std::vector<std::int64_t>(std::max<std::int64_t>(c.num_layers, 0), 4);
  c.mlp_hidden = j.contains("mlp_hidden") ? widths_from_json(j["mlp_hidden"], c.num_layers, "mlp_hidden")
                                          : std::vector<std::int64_t>(std::max<std::int64_t>(c.num_layers, 0), 128);
  c.num_classes = j.value("num_classes", d.num_classes);
  c.pooling = pooling_from_string(j.value("pooling", std::string("cls")));
  c.use_cls_token = j.value("use_cls_token", true);
}

ModelConfig model_config_from_json(const Json& j) {
  ModelConfig c;
  from_json(j, c);
  return c;
}

std::string dump_stable(const Json& j) { return j.dump(2) + "\n"; }

std::string format_hms(double seconds) {
  if (!(seconds >= 0.0)) seconds = 0.0;
  const auto total = static_cast<long long>(std::llround(seconds));
  char buf[32];
  std::snprintf(buf, sizeof buf, "%02lld:%02lld:%02lld", total / 3600, (total / 60) % 60, total % 60);
  return buf;
}

}  // namespace vp
