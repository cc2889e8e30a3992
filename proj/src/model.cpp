#include "wav2sleep/model.hpp"

#include <bit>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "json_util.hpp"

namespace wav2sleep {

// --- ModelConfig -------------------------------------------------------------

std::size_t ModelConfig::samples_per_epoch(SignalKind kind) const {
  return is_cardiac(kind) ? cardiac_samples_per_epoch : respiratory_samples_per_epoch;
}

const std::vector<std::size_t>& ModelConfig::encoder_channels(SignalKind kind) const {
  return is_cardiac(kind) ? cardiac_channels : respiratory_channels;
}

std::size_t ModelConfig::encoder_flat_width(SignalKind kind) const {
  return 4 * encoder_channels(kind).back();
}

std::size_t ModelConfig::sequence_receptive_radius() const {
  const std::size_t per_block = std::accumulate(seq_dilations.begin(), seq_dilations.end(),
                                                std::size_t{0}) *
                                ((seq_kernel - 1) / 2);
  return seq_blocks * per_block;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
  if (feature_dim == 0) fail("feature_dim must be positive");
  if (dropout < 0.0 || dropout >= 1.0) fail("dropout must be in [0, 1)");
  if (encoder_kernel % 2 == 0) fail("encoder_kernel must be odd");
  if (seq_kernel % 2 == 0) fail("seq_kernel must be odd");
  if (mixer_heads == 0 || feature_dim % mixer_heads != 0) {
    fail("feature_dim must be divisible by mixer_heads");
  }
  if (mixer_hidden == 0) fail("mixer_hidden must be positive");
  if (classes < 2) fail("classes must be at least 2");
  if (epochs == 0) fail("epochs must be positive");
  if (seq_dilations.empty()) fail("seq_dilations must be non-empty");
  for (auto d : seq_dilations) {
    if (d == 0) fail("dilations must be positive");
    if ((seq_kernel - 1) * d + 1 > epochs) {
      fail("sequence kernel span at dilation " + std::to_string(d) + " exceeds " +
           std::to_string(epochs) + " epochs");
    }
  }
  for (auto [k, channels, label] :
       {std::tuple{cardiac_samples_per_epoch, &cardiac_channels, "cardiac"},
        std::tuple{respiratory_samples_per_epoch, &respiratory_channels, "respiratory"}}) {
    if (k < 8 || !std::has_single_bit(k)) {
      fail(std::string(label) + " samples per epoch must be a power of two >= 8");
    }
    const auto layers = static_cast<std::size_t>(std::countr_zero(k / 4));
    if (channels->size() != layers) {
      fail(std::string(label) + " encoder needs log2(" + std::to_string(k) + "/4) = " +
           std::to_string(layers) + " channel entries, got " + std::to_string(channels->size()));
    }
    for (auto c : *channels) {
      if (c == 0) fail("encoder channel counts must be positive");
    }
  }
}

ModelConfig ModelConfig::tiny() {
  ModelConfig c;
  c.feature_dim = 8;
  c.respiratory_channels = {4, 8};
  c.cardiac_channels = {4, 8};
  c.mixer_hidden = 16;
  c.mixer_heads = 2;
  c.seq_kernel = 3;
  c.seq_dilations = {1, 2};
  c.epochs = 8;
  c.cardiac_samples_per_epoch = 16;
  c.respiratory_samples_per_epoch = 16;
  return c;
}

nlohmann::json ModelConfig::to_json() const {
  return {
      {"feature_dim", feature_dim},
      {"dropout", dropout},
      {"encoder_kernel", encoder_kernel},
      {"respiratory_channels", respiratory_channels},
      {"cardiac_channels", cardiac_channels},
      {"mixer_layers", mixer_layers},
      {"mixer_hidden", mixer_hidden},
      {"mixer_heads", mixer_heads},
      {"seq_blocks", seq_blocks},
      {"seq_kernel", seq_kernel},
      {"seq_dilations", seq_dilations},
      {"classes", classes},
      {"epochs", epochs},
      {"cardiac_samples_per_epoch", cardiac_samples_per_epoch},
      {"respiratory_samples_per_epoch", respiratory_samples_per_epoch},
      {"modality_embeddings", modality_embeddings},
      {"encoder_instance_norm", encoder_instance_norm},
      {"norm_epsilon", norm_epsilon},
  };
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  constexpr std::string_view section = "model";
  detail::reject_unknown_keys(
      j, section,
      {"feature_dim", "dropout", "encoder_kernel", "respiratory_channels", "cardiac_channels",
       "mixer_layers", "mixer_hidden", "mixer_heads", "seq_blocks", "seq_kernel", "seq_dilations",
       "classes", "epochs", "cardiac_samples_per_epoch", "respiratory_samples_per_epoch",
       "modality_embeddings", "encoder_instance_norm", "norm_epsilon"});
  ModelConfig c;
  detail::read_if_present(j, "feature_dim", c.feature_dim, section);
  detail::read_if_present(j, "dropout", c.dropout, section);
  detail::read_if_present(j, "encoder_kernel", c.encoder_kernel, section);
  detail::read_if_present(j, "respiratory_channels", c.respiratory_channels, section);
  detail::read_if_present(j, "cardiac_channels", c.cardiac_channels, section);
  detail::read_if_present(j, "mixer_layers", c.mixer_layers, section);
  detail::read_if_present(j, "mixer_hidden", c.mixer_hidden, section);
  detail::read_if_present(j, "mixer_heads", c.mixer_heads, section);
  detail::read_if_present(j, "seq_blocks", c.seq_blocks, section);
  detail::read_if_present(j, "seq_kernel", c.seq_kernel, section);
  detail::read_if_present(j, "seq_dilations", c.seq_dilations, section);
  detail::read_if_present(j, "classes", c.classes, section);
  detail::read_if_present(j, "epochs", c.epochs, section);
  detail::read_if_present(j, "cardiac_samples_per_epoch", c.cardiac_samples_per_epoch, section);
  detail::read_if_present(j, "respiratory_samples_per_epoch", c.respiratory_samples_per_epoch,
                          section);
  detail::read_if_present(j, "modality_embeddings", c.modality_embeddings, section);
  detail::read_if_present(j, "encoder_instance_norm", c.encoder_instance_norm, section);
  detail::read_if_present(j, "norm_epsilon", c.norm_epsilon, section);
  c.validate();
  return c;
}

// --- Params ------------------------------------------------------------------

template <typename T>
void Params<T>::add(std::string name, Tensor<T> tensor) {
  if (index_.count(name)) throw std::logic_error("duplicate parameter " + name);
  index_.emplace(name, entries_.size());
  entries_.emplace_back(std::move(name), std::move(tensor));
}

template <typename T>
bool Params<T>::contains(std::string_view name) const {
  return index_.count(std::string(name)) != 0;
}

template <typename T>
const Tensor<T>& Params<T>::at(std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw std::out_of_range("no parameter named " + std::string(name));
  return entries_[it->second].second;
}

template <typename T>
Tensor<T>& Params<T>::at(std::string_view name) {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw std::out_of_range("no parameter named " + std::string(name));
  return entries_[it->second].second;
}

template <typename T>
std::size_t Params<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : entries_) n += t.numel();
  return n;
}

template <typename T>
void Params<T>::zero_grad() {
  for (auto& [name, t] : entries_) t.zero_grad();
}

template <typename T>
void Params<T>::set_requires_grad(bool flag) {
  for (auto& [name, t] : entries_) t.set_requires_grad(flag);
}

template <typename T>
Params<T> Params<T>::clone() const {
  Params out;
  for (const auto& [name, t] : entries_) {
    auto v = t.values();
    out.add(name, Tensor<T>::from(t.shape(), std::vector<T>(v.begin(), v.end()), t.requires_grad()));
  }
  return out;
}

template <typename T>
template <typename U>
Params<U> Params<T>::cast() const {
  Params<U> out;
  for (const auto& [name, t] : entries_) {
    auto v = t.values();
    out.add(name, Tensor<U>::from(t.shape(), std::vector<U>(v.begin(), v.end()), t.requires_grad()));
  }
  return out;
}

template class Params<float>;
template class Params<double>;
template Params<double> Params<float>::cast<double>() const;
template Params<float> Params<double>::cast<float>() const;
template Params<float> Params<float>::cast<float>() const;
template Params<double> Params<double>::cast<double>() const;

// --- parameter layout --------------------------------------------------------

namespace {

std::string encoder_prefix(SignalKind kind) { return "encoder." + std::string(name_of(kind)); }

std::string block_prefix(SignalKind kind, std::size_t layer) {
  return encoder_prefix(kind) + ".block" + std::to_string(layer);
}

std::string mixer_layer_prefix(std::size_t layer) { return "mixer.layer" + std::to_string(layer); }

std::string seq_layer_prefix(std::size_t block, std::size_t layer) {
  return "sequence.block" + std::to_string(block) + ".layer" + std::to_string(layer);
}

template <typename T>
class Initializer {
 public:
  Initializer(Params<T>& params, std::uint64_t seed) : params_(params), rng_(seed) {}

  void uniform(const std::string& name, Shape shape, std::size_t fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<T> values(numel(shape));
    for (auto& v : values) v = static_cast<T>(dist(rng_));
    params_.add(name, Tensor<T>::from(std::move(shape), std::move(values), true));
  }
  void constant(const std::string& name, Shape shape, T value) {
    params_.add(name, Tensor<T>::full(std::move(shape), value, true));
  }
  void conv(const std::string& prefix, std::size_t out, std::size_t in, std::size_t kernel) {
    uniform(prefix + ".weights", {out, in, kernel}, in * kernel);
    uniform(prefix + ".bias", {out}, in * kernel);
  }
  void dense(const std::string& prefix, std::size_t in, std::size_t out) {
    uniform(prefix + ".weights", {in, out}, in);
    uniform(prefix + ".bias", {out}, in);
  }
  void norm(const std::string& prefix, std::size_t width) {
    constant(prefix + ".scale", {width}, T{1});
    constant(prefix + ".shift", {width}, T{0});
  }

 private:
  Params<T>& params_;
  std::mt19937_64 rng_;
};

}  // namespace

template <typename T>
Params<T> init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Params<T> params;
  Initializer<T> init(params, seed);
  const std::size_t F = config.feature_dim;

  for (auto kind : kAllKinds) {
    std::size_t in = 1;
    const auto& channels = config.encoder_channels(kind);
    for (std::size_t l = 0; l < channels.size(); ++l) {
      const std::size_t out = channels[l];
      const auto prefix = block_prefix(kind, l);
      for (std::size_t c = 0; c < 3; ++c) {
        init.conv(prefix + ".conv" + std::to_string(c), out, c == 0 ? in : out,
                  config.encoder_kernel);
        if (config.encoder_instance_norm) init.norm(prefix + ".norm" + std::to_string(c), out);
      }
      if (in != out) init.conv(prefix + ".shortcut", out, in, 1);
      in = out;
    }
    init.dense(encoder_prefix(kind) + ".dense", config.encoder_flat_width(kind), F);
  }

  init.uniform("mixer.cls", {F}, F);
  if (config.modality_embeddings) {
    for (auto kind : kAllKinds) init.uniform("mixer.embedding." + std::string(name_of(kind)), {F}, F);
  }
  for (std::size_t l = 0; l < config.mixer_layers; ++l) {
    const auto prefix = mixer_layer_prefix(l);
    init.norm(prefix + ".attn_norm", F);
    init.dense(prefix + ".attn.query", F, F);
    init.dense(prefix + ".attn.key", F, F);
    init.dense(prefix + ".attn.value", F, F);
    init.dense(prefix + ".attn.out", F, F);
    init.norm(prefix + ".ffn_norm", F);
    init.dense(prefix + ".ffn.hidden", F, config.mixer_hidden);
    init.dense(prefix + ".ffn.out", config.mixer_hidden, F);
  }
  init.norm("mixer.norm", F);

  for (std::size_t b = 0; b < config.seq_blocks; ++b) {
    for (std::size_t l = 0; l < config.seq_dilations.size(); ++l) {
      const auto prefix = seq_layer_prefix(b, l);
      init.conv(prefix + ".conv", F, F, config.seq_kernel);
      init.norm(prefix + ".norm", F);
    }
  }
  init.dense("sequence.head", F, config.classes);
  return params;
}

template Params<float> init_params<float>(const ModelConfig&, std::uint64_t);
template Params<double> init_params<double>(const ModelConfig&, std::uint64_t);

// --- forward -----------------------------------------------------------------

namespace {

template <typename T>
Tensor<T> maybe_dropout(const Tensor<T>& x, const ModelConfig& config, ForwardContext& ctx) {
  if (!ctx.training || config.dropout <= 0.0) return x;
  if (ctx.rng == nullptr) throw std::logic_error("training forward pass needs an rng");
  return dropout(x, config.dropout, *ctx.rng);
}

template <typename T>
Tensor<T> dense(const Tensor<T>& x, const Params<T>& p, const std::string& prefix) {
  return affine(x, p.at(prefix + ".weights"), p.at(prefix + ".bias"));
}

template <typename T>
Tensor<T> norm_last(const Tensor<T>& x, const Params<T>& p, const std::string& prefix,
                    const ModelConfig& config) {
  return layer_norm(x, p.at(prefix + ".scale"), p.at(prefix + ".shift"),
                    static_cast<T>(config.norm_epsilon));
}

}  // namespace

template <typename T>
Tensor<T> encode_signal_flat(const Tensor<T>& x, SignalKind kind, const Params<T>& params,
                             const ModelConfig& config, ForwardContext& ctx) {
  const std::size_t k = config.samples_per_epoch(kind);
  const std::size_t expected = k * config.epochs;
  if (x.rank() != 2 || x.dim(1) != expected) {
    throw ShapeError("encode_signal: " + std::string(name_of(kind)) + " input must be [B, " +
                     std::to_string(expected) + "], got " + to_string(x.shape()));
  }
  const std::size_t B = x.dim(0);
  auto h = reshape(x, {B, 1, expected});
  std::size_t in = 1;
  const auto& channels = config.encoder_channels(kind);
  for (std::size_t l = 0; l < channels.size(); ++l) {
    const auto prefix = block_prefix(kind, l);
    auto y = h;
    for (std::size_t c = 0; c < 3; ++c) {
      const auto conv = prefix + ".conv" + std::to_string(c);
      y = conv1d(y, params.at(conv + ".weights"), params.at(conv + ".bias"), 1);
      if (config.encoder_instance_norm) {
        const auto norm = prefix + ".norm" + std::to_string(c);
        y = instance_norm(y, params.at(norm + ".scale"), params.at(norm + ".shift"),
                          static_cast<T>(config.norm_epsilon));
      }
      y = maybe_dropout(gelu(y), config, ctx);
    }
    auto shortcut = h;
    if (in != channels[l]) {
      shortcut = conv1d(h, params.at(prefix + ".shortcut.weights"),
                        params.at(prefix + ".shortcut.bias"), 1);
    }
    h = maxpool1d(add(y, shortcut));
    in = channels[l];
  }
  return fold_epochs(h, config.epochs);
}

template <typename T>
Tensor<T> encode_signal(const Tensor<T>& x, SignalKind kind, const Params<T>& params,
                        const ModelConfig& config, ForwardContext& ctx) {
  auto flat = encode_signal_flat(x, kind, params, config, ctx);
  return dense(flat, params, encoder_prefix(kind) + ".dense");
}

template <typename T>
Tensor<T> mix_tokens(const std::vector<SignalKind>& kinds, const std::vector<Tensor<T>>& tokens,
                     const std::vector<std::vector<bool>>* present, const Params<T>& params,
                     const ModelConfig& config, ForwardContext& ctx) {
  if (kinds.empty() || kinds.size() != tokens.size()) {
    throw PreconditionError("mix_tokens: need one token tensor per kind and at least one kind");
  }
  const std::size_t F = config.feature_dim;
  const std::size_t N = tokens.front().dim(0);
  for (const auto& t : tokens) require_shape(t, {N, F}, "mix_tokens token");

  std::vector<Tensor<T>> rows;
  rows.reserve(tokens.size() + 1);
  rows.push_back(broadcast_rows(params.at("mixer.cls"), N));
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (config.modality_embeddings) {
      rows.push_back(add_row(tokens[i], params.at("mixer.embedding." + std::string(name_of(kinds[i])))));
    } else {
      rows.push_back(tokens[i]);
    }
  }
  const std::size_t m = rows.size();

  AttentionMask mask = AttentionMask::all(m, m);
  if (present != nullptr) {
    std::vector<std::vector<bool>> keys;
    keys.reserve(present->size());
    for (const auto& group : *present) {
      if (group.size() != tokens.size()) {
        throw ShapeError("mix_tokens: presence row does not match the number of tokens");
      }
      std::vector<bool> row{true};
      row.insert(row.end(), group.begin(), group.end());
      keys.push_back(std::move(row));
    }
    mask = AttentionMask::from_keys(keys, m);
  }

  auto x = stack_tokens(rows);
  for (std::size_t l = 0; l < config.mixer_layers; ++l) {
    const auto prefix = mixer_layer_prefix(l);
    AttentionParams<T> attn{
        params.at(prefix + ".attn.query.weights"), params.at(prefix + ".attn.query.bias"),
        params.at(prefix + ".attn.key.weights"),   params.at(prefix + ".attn.key.bias"),
        params.at(prefix + ".attn.value.weights"), params.at(prefix + ".attn.value.bias"),
        params.at(prefix + ".attn.out.weights"),   params.at(prefix + ".attn.out.bias")};
    auto h = norm_last(x, params, prefix + ".attn_norm", config);
    h = masked_multi_head_attention(h, h, h, config.mixer_heads, mask, attn);
    x = add(x, maybe_dropout(h, config, ctx));

    h = norm_last(x, params, prefix + ".ffn_norm", config);
    h = maybe_dropout(gelu(dense(h, params, prefix + ".ffn.hidden")), config, ctx);
    h = dense(h, params, prefix + ".ffn.out");
    x = add(x, maybe_dropout(h, config, ctx));
  }
  return norm_last(take_token(x, 0), params, "mixer.norm", config);
}

template <typename T>
Tensor<T> mix_epoch(const std::vector<std::pair<SignalKind, Tensor<T>>>& features,
                    const Params<T>& params, const ModelConfig& config, ForwardContext& ctx) {
  if (features.empty()) throw PreconditionError("mix_epoch: empty modality set");
  std::vector<SignalKind> kinds;
  std::vector<Tensor<T>> tokens;
  for (const auto& [kind, feature] : features) {
    require_shape(feature, {config.feature_dim}, "mix_epoch feature");
    kinds.push_back(kind);
    tokens.push_back(reshape(feature, {1, config.feature_dim}));
  }
  auto out = mix_tokens(kinds, tokens, nullptr, params, config, ctx);
  return reshape(out, {config.feature_dim});
}

template <typename T>
Tensor<T> mix_sequence(const Tensor<T>& z, const Params<T>& params, const ModelConfig& config,
                       ForwardContext& ctx) {
  require_shape(z, {z.rank() == 3 ? z.dim(0) : 0, config.epochs, config.feature_dim},
                "mix_sequence input");
  auto x = swap_last_axes(z);  // [B, F, T]
  for (std::size_t b = 0; b < config.seq_blocks; ++b) {
    auto h = x;
    for (std::size_t l = 0; l < config.seq_dilations.size(); ++l) {
      const auto prefix = seq_layer_prefix(b, l);
      h = conv1d(h, params.at(prefix + ".conv.weights"), params.at(prefix + ".conv.bias"),
                 config.seq_dilations[l]);
      auto t = norm_last(swap_last_axes(h), params, prefix + ".norm", config);
      t = maybe_dropout(gelu(t), config, ctx);
      h = swap_last_axes(t);
    }
    x = add(x, h);
  }
  return dense(swap_last_axes(x), params, "sequence.head");
}

template <typename T>
Tensor<T> forward(const ModelInput<T>& input, const Params<T>& params, const ModelConfig& config,
                  ForwardContext& ctx) {
  const std::size_t B = input.batch;
  const std::size_t T_ = config.epochs;
  const std::size_t F = config.feature_dim;
  const std::size_t N = B * T_;
  if (B == 0) throw PreconditionError("forward: empty batch");
  for (std::size_t b = 0; b < B; ++b) {
    bool any = false;
    for (auto kind : kAllKinds) {
      const auto& kept = input.kept[index_of(kind)];
      any = any || (b < kept.size() && kept[b]);
    }
    if (!any) throw PreconditionError("forward: recording " + std::to_string(b) + " has no kept modality");
  }

  std::vector<SignalKind> kinds;
  std::vector<Tensor<T>> tokens;
  std::vector<std::vector<bool>> present(B);
  for (auto kind : kAllKinds) {
    const auto& kept = input.kept[index_of(kind)];
    std::vector<std::size_t> rows;
    for (std::size_t b = 0; b < B && b < kept.size(); ++b) {
      if (kept[b]) rows.push_back(b);
    }
    for (std::size_t b = 0; b < B; ++b) present[b].push_back(b < kept.size() && kept[b]);
    kinds.push_back(kind);
    if (rows.empty()) {
      tokens.push_back(Tensor<T>::zeros({N, F}));
      continue;
    }
    const auto& signal = input.signals[index_of(kind)];
    const std::size_t width = config.samples_per_epoch(kind) * T_;
    require_shape(signal, {B, width}, "forward signal");
    // Only kept rows are encoded; the rest of the batch never touches the encoder.
    std::vector<T> gathered(rows.size() * width);
    auto sv = signal.values();
    for (std::size_t i = 0; i < rows.size(); ++i) {
      std::copy_n(sv.data() + rows[i] * width, width, gathered.data() + i * width);
    }
    auto x = Tensor<T>::from({rows.size(), width}, std::move(gathered));
    auto features = encode_signal(x, kind, params, config, ctx);
    auto full = scatter_rows(features, rows, B);
    tokens.push_back(reshape(full, {N, F}));
  }

  auto z = mix_tokens(kinds, tokens, &present, params, config, ctx);
  return mix_sequence(reshape(z, {B, T_, F}), params, config, ctx);
}

#define WAV2SLEEP_INSTANTIATE_MODEL(T)                                                         \
  template Tensor<T> encode_signal(const Tensor<T>&, SignalKind, const Params<T>&,             \
                                   const ModelConfig&, ForwardContext&);                       \
  template Tensor<T> encode_signal_flat(const Tensor<T>&, SignalKind, const Params<T>&,        \
                                        const ModelConfig&, ForwardContext&);                  \
  template Tensor<T> mix_tokens(const std::vector<SignalKind>&, const std::vector<Tensor<T>>&, \
                                const std::vector<std::vector<bool>>*, const Params<T>&,       \
                                const ModelConfig&, ForwardContext&);                          \
  template Tensor<T> mix_epoch(const std::vector<std::pair<SignalKind, Tensor<T>>>&,           \
                               const Params<T>&, const ModelConfig&, ForwardContext&);         \
  template Tensor<T> mix_sequence(const Tensor<T>&, const Params<T>&, const ModelConfig&,      \
                                  ForwardContext&);                                            \
  template Tensor<T> forward(const ModelInput<T>&, const Params<T>&, const ModelConfig&,       \
                             ForwardContext&);

WAV2SLEEP_INSTANTIATE_MODEL(float)
WAV2SLEEP_INSTANTIATE_MODEL(double)

#undef WAV2SLEEP_INSTANTIATE_MODEL

}  // namespace wav2sleep
