#include "ch4/runtime/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <fstream>
#include <sstream>

#include "ch4/error.hpp"

namespace ch4 {

namespace pt = boost::property_tree;

void TrainConfig::validate() const {
  encoder.validate();
  if (epochs == 0) throw ConfigError("train: epochs must be at least 1");
  if (batch_size == 0) throw ConfigError("train: batch_size must be at least 1");
  if (!(optimizer.max_lr > 0.0)) throw ConfigError("train: max_lr must be positive");
  if (optimizer.beta1 < 0 || optimizer.beta1 >= 1 || optimizer.beta2 < 0 || optimizer.beta2 >= 1)
    throw ConfigError("train: betas must lie in [0, 1)");
  if (optimizer.warmup_fraction < 0 || optimizer.warmup_fraction >= 1)
    throw ConfigError("train: warmup_fraction must lie in [0, 1)");
  if (validation_fraction < 0 || validation_fraction >= 1) throw ConfigError("train: validation_fraction must lie in [0, 1)");
  if (manifest.empty()) {
    synth.validate();
    if (synth.feature_dim != encoder.feature_dim) throw ConfigError("synth.feature_dim differs from model.feature_dim");
    if (synth.vocab != encoder.vocab) throw ConfigError("synth.vocab differs from model.vocab");
    if (synth_count < 2) throw ConfigError("synth: count must be at least 2");
  }
}

namespace {

template <class T>
T get(const pt::ptree& tree, const std::string& key, T fallback) {
  const auto child = tree.get_child_optional(key);
  if (!child) return fallback;
  if (const auto v = child->template get_value_optional<T>()) return *v;
  throw ConfigError("config: bad value for " + key + ": '" + child->data() + "'");
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) {
    const auto b = item.find_first_not_of(" \t"), e = item.find_last_not_of(" \t");
    if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

std::size_t parse_count(const std::string& s, const std::string& what) {
  try {
    std::size_t used = 0;
    const unsigned long v = std::stoul(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::logic_error&) {
    throw ConfigError("config: bad number '" + s + "' in " + what);
  }
}

std::vector<BlockSpec> parse_layers(const pt::ptree& m, const EncoderConfig& enc) {
  BlockSpec proto;
  proto.causal = get(m, "causal", false);
  proto.conv_kernel = get<std::size_t>(m, "conv_kernel", 15);
  if (auto list = m.get_optional<std::string>("layer_mixers")) {
    std::vector<BlockSpec> out;
    for (const std::string& item : split(*list, ',')) {
      BlockSpec s = proto;
      const auto parts = split(item, ':');
      s.mixer = parse_mixer_kind(parts.empty() ? "" : parts[0]);
      if (s.mixer == MixerKind::parallel) {
        if (parts.size() != 2) throw ConfigError("config: parallel layers are written parallel:<d_mhsa>");
        s.d_mhsa = parse_count(parts[1], "layer_mixers");
        if (s.d_mhsa > enc.d) throw ConfigError("config: d_mhsa exceeds d");
        s.d_h3 = enc.d - s.d_mhsa;
      }
      out.push_back(s);
    }
    return out;
  }
  const std::size_t n = get<std::size_t>(m, "layers", 2);
  const MixerKind mixer = parse_mixer_kind(get<std::string>(m, "mixer", "mhsa"));
  const std::string placement = get<std::string>(m, "h3_placement", "");
  EncoderConfig base;
  base.layers = {proto};
  if (!placement.empty()) {
    const auto parts = split(placement, ':');
    if (parts.size() != 2) throw ConfigError("config: h3_placement is top:K, bottom:K or mask:bits");
    if (parts[0] == "top") return make_ch4_config(n, H3Placement::top(parse_count(parts[1], "h3_placement")), base).layers;
    if (parts[0] == "bottom")
      return make_ch4_config(n, H3Placement::bottom(parse_count(parts[1], "h3_placement")), base).layers;
    if (parts[0] == "mask") {
      std::vector<bool> mask;
      for (char c : parts[1]) {
        if (c != '0' && c != '1') throw ConfigError("config: mask bits must be 0 or 1");
        mask.push_back(c == '1');
      }
      return make_ch4_config(n, H3Placement::explicit_mask(mask), base).layers;
    }
    throw ConfigError("config: unknown h3_placement '" + parts[0] + "'");
  }
  proto.mixer = mixer;
  if (mixer == MixerKind::parallel) {
    proto.d_mhsa = get<std::size_t>(m, "d_mhsa", enc.d / 2);
    if (proto.d_mhsa > enc.d) throw ConfigError("config: d_mhsa exceeds d");
    proto.d_h3 = enc.d - proto.d_mhsa;
  }
  return std::vector<BlockSpec>(n, proto);
}

TrainConfig from_tree(const pt::ptree& root) {
  static const std::vector<std::string> sections{"model", "train", "synth", "checkpoint"};
  for (const auto& [name, _] : root)
    if (std::find(sections.begin(), sections.end(), name) == sections.end())
      throw ConfigError("config: unknown section [" + name + "]");
  const pt::ptree empty;
  const pt::ptree& m = root.get_child("model", empty);
  const pt::ptree& t = root.get_child("train", empty);
  const pt::ptree& s = root.get_child("synth", empty);

  TrainConfig c;
  SyntheticTaskConfig& y = c.synth;
  y.vocab = get(s, "vocab", y.vocab);
  y.feature_dim = get(s, "feature_dim", y.feature_dim);
  y.min_frames_per_token = get(s, "min_frames_per_token", y.min_frames_per_token);
  y.max_frames_per_token = get(s, "max_frames_per_token", y.max_frames_per_token);
  y.min_tokens = get(s, "min_tokens", y.min_tokens);
  y.max_tokens = get(s, "max_tokens", y.max_tokens);
  y.noise = get(s, "noise", y.noise);
  y.template_seed = get(s, "template_seed", y.template_seed);
  y.session_length = get(s, "session_length", y.session_length);
  c.synth_count = get(s, "count", c.synth_count);
  c.synth_seed = get(s, "seed", c.synth_seed);

  EncoderConfig& e = c.encoder;
  e.feature_dim = get(m, "feature_dim", y.feature_dim);
  e.vocab = get(m, "vocab", y.vocab);
  e.d = get(m, "d", e.d);
  e.mhsa_heads = get(m, "mhsa_heads", e.mhsa_heads);
  e.h3_heads = get(m, "h3_heads", e.h3_heads);
  e.shift_state = get(m, "shift_state", e.shift_state);
  e.diag_state = get(m, "diag_state", e.diag_state);
  const std::string sharing = get<std::string>(m, "diag_sharing", "per_head");
  if (sharing != "per_head" && sharing != "per_entry") throw ConfigError("config: diag_sharing is per_head or per_entry");
  e.diag_sharing = sharing == "per_head" ? DiagSharing::per_head : DiagSharing::per_entry;
  e.subsample = get(m, "subsample", e.subsample);
  e.dropout = get(m, "dropout", e.dropout);
  e.layers = parse_layers(m, e);

  OptimizerConfig& o = c.optimizer;
  o.max_lr = get(t, "max_lr", o.max_lr);
  o.beta1 = get(t, "beta1", o.beta1);
  o.beta2 = get(t, "beta2", o.beta2);
  o.eps = get(t, "eps", o.eps);
  o.weight_decay = get(t, "weight_decay", o.weight_decay);
  o.warmup_fraction = get(t, "warmup_fraction", o.warmup_fraction);
  o.grad_clip = get(t, "grad_clip", o.grad_clip);
  c.manifest = get<std::string>(t, "manifest", "");
  c.epochs = get(t, "epochs", c.epochs);
  c.batch_size = get(t, "batch_size", c.batch_size);
  c.seed = get(t, "seed", c.seed);
  c.validation_fraction = get(t, "validation_fraction", c.validation_fraction);
  c.spec_augment = get(t, "spec_augment", c.spec_augment);
  c.masks.time_masks = get(t, "time_masks", c.masks.time_masks);
  c.masks.max_time_fraction = get(t, "max_time_fraction", c.masks.max_time_fraction);
  c.masks.freq_masks = get(t, "freq_masks", c.masks.freq_masks);
  c.masks.max_freq_width = get(t, "max_freq_width", c.masks.max_freq_width);
  c.validate();
  return c;
}

pt::ptree read_tree(const std::string& text) {
  pt::ptree root;
  std::istringstream in(text);
  try {
    pt::read_ini(in, root);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError("config: " + std::string(e.what()));
  }
  return root;
}

}  // namespace

TrainConfig parse_config(const std::string& text) { return parse_config(text, {}); }

TrainConfig parse_config(const std::string& text, const std::vector<std::pair<std::string, std::string>>& overrides) {
  pt::ptree root = read_tree(text);
  for (const auto& [key, value] : overrides) {
    if (key.find('.') == std::string::npos) throw ConfigError("config override '" + key + "' must be section.key");
    // Explicit layer lists win over layer counts, so a count override drops them.
    if (key == "model.layers" || key == "model.mixer" || key == "model.h3_placement")
      if (auto model = root.get_child_optional("model")) model->erase("layer_mixers");
    root.put(key, value);
  }
  return from_tree(root);
}

TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string to_ini(const TrainConfig& c) {
  std::ostringstream os;
  os.precision(17);
  const EncoderConfig& e = c.encoder;
  os << "[model]\n"
     << "feature_dim = " << e.feature_dim << "\nvocab = " << e.vocab << "\nd = " << e.d << "\nmhsa_heads = " << e.mhsa_heads
     << "\nh3_heads = " << e.h3_heads << "\nshift_state = " << e.shift_state << "\ndiag_state = " << e.diag_state
     << "\ndiag_sharing = " << (e.diag_sharing == DiagSharing::per_head ? "per_head" : "per_entry")
     << "\nsubsample = " << e.subsample << "\ndropout = " << e.dropout
     << "\ncausal = " << (e.causal() ? "true" : "false")
     << "\nconv_kernel = " << (e.layers.empty() ? 15 : e.layers.front().conv_kernel) << "\nlayer_mixers = ";
  for (std::size_t i = 0; i < e.layers.size(); ++i) {
    os << (i ? "," : "") << to_string(e.layers[i].mixer);
    if (e.layers[i].mixer == MixerKind::parallel) os << ":" << e.layers[i].d_mhsa;
  }
  const OptimizerConfig& o = c.optimizer;
  os << "\n\n[train]\n"
     << "epochs = " << c.epochs << "\nbatch_size = " << c.batch_size << "\nseed = " << c.seed
     << "\nmax_lr = " << o.max_lr << "\nbeta1 = " << o.beta1 << "\nbeta2 = " << o.beta2 << "\neps = " << o.eps
     << "\nweight_decay = " << o.weight_decay << "\nwarmup_fraction = " << o.warmup_fraction
     << "\ngrad_clip = " << o.grad_clip << "\nvalidation_fraction = " << c.validation_fraction
     << "\nspec_augment = " << (c.spec_augment ? "true" : "false") << "\ntime_masks = " << c.masks.time_masks
     << "\nmax_time_fraction = " << c.masks.max_time_fraction << "\nfreq_masks = " << c.masks.freq_masks
     << "\nmax_freq_width = " << c.masks.max_freq_width << "\n";
  if (!c.manifest.empty()) os << "manifest = " << c.manifest << "\n";
  const SyntheticTaskConfig& y = c.synth;
  os << "\n[synth]\n"
     << "vocab = " << y.vocab << "\nfeature_dim = " << y.feature_dim << "\nmin_frames_per_token = " << y.min_frames_per_token
     << "\nmax_frames_per_token = " << y.max_frames_per_token << "\nmin_tokens = " << y.min_tokens
     << "\nmax_tokens = " << y.max_tokens << "\nnoise = " << y.noise << "\ntemplate_seed = " << y.template_seed
     << "\nsession_length = " << y.session_length << "\ncount = " << c.synth_count << "\nseed = " << c.synth_seed << "\n";
  return os.str();
}

}  // namespace ch4
