#include "ch4/data/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <regex>

#include "ch4/error.hpp"

namespace ch4 {

void SyntheticTaskConfig::validate() const {
  if (vocab < 2) throw ConfigError("synthetic task: vocab must be at least 2");
  if (feature_dim == 0) throw ConfigError("synthetic task: feature_dim must be positive");
  if (min_frames_per_token < 2 || max_frames_per_token < min_frames_per_token)
    throw ConfigError("synthetic task: frames per token must satisfy 2 <= min <= max");
  if (min_tokens == 0 || max_tokens < min_tokens) throw ConfigError("synthetic task: token counts must satisfy 1 <= min <= max");
  if (!(noise >= 0.0)) throw ConfigError("synthetic task: noise must be non-negative");
  if (session_length == 0) throw ConfigError("synthetic task: session_length must be positive");
}

Tensor token_templates(const SyntheticTaskConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.template_seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor t({cfg.vocab, cfg.feature_dim});
  for (std::size_t v = 0; v < cfg.vocab; ++v) {
    double norm = 0.0;
    for (std::size_t f = 0; f < cfg.feature_dim; ++f) norm += (t(v, f) = normal(rng)) * t(v, f);
    const double s = std::sqrt(static_cast<double>(cfg.feature_dim) / norm);
    for (std::size_t f = 0; f < cfg.feature_dim; ++f) t(v, f) *= s;
  }
  return t;
}

std::vector<Utterance> synth_generate(const SyntheticTaskConfig& cfg, std::uint64_t seed, std::size_t count) {
  const Tensor templates = token_templates(cfg);
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> n_tokens(cfg.min_tokens, cfg.max_tokens);
  std::uniform_int_distribution<std::size_t> duration(cfg.min_frames_per_token, cfg.max_frames_per_token);
  std::uniform_int_distribution<std::uint32_t> token(1, static_cast<std::uint32_t>(cfg.vocab));
  std::normal_distribution<double> noise(0.0, 1.0);

  std::vector<Utterance> out;
  std::uint32_t previous = kBlank;
  for (std::size_t i = 0; i < count; ++i) {
    Utterance u;
    u.session = i / cfg.session_length;
    const std::size_t index = i % cfg.session_length;
    if (index == 0) previous = kBlank;
    u.id = "s" + std::to_string(u.session) + "_u" + std::to_string(index);
    std::vector<std::size_t> durations;
    for (std::size_t n = n_tokens(rng); n > 0; --n) {
      std::uint32_t t;
      do t = token(rng);
      while (t == previous);
      u.labels.push_back(previous = t);
      durations.push_back(duration(rng));
    }
    u.frames = Tensor({std::accumulate(durations.begin(), durations.end(), std::size_t{0}), cfg.feature_dim});
    std::size_t row = 0;
    for (std::size_t n = 0; n < u.labels.size(); ++n)
      for (std::size_t r = 0; r < durations[n]; ++r, ++row)
        for (std::size_t f = 0; f < cfg.feature_dim; ++f)
          u.frames(row, f) = templates(u.labels[n] - 1, f) + (cfg.noise > 0.0 ? cfg.noise * noise(rng) : 0.0);
    out.push_back(std::move(u));
  }
  return out;
}

Utterance concat_longform(const std::vector<Utterance>& utts, std::size_t k, std::size_t begin) {
  if (k == 0) throw ConfigError("concat_longform: k must be at least 1");
  if (begin + k > utts.size())
    throw ConfigError("concat_longform: " + std::to_string(k) + " utterances requested from " +
                      std::to_string(utts.size() - std::min(begin, utts.size())));
  const std::size_t F = utts[begin].frames.cols();
  std::size_t T = 0;
  for (std::size_t i = begin; i < begin + k; ++i) {
    if (utts[i].frames.cols() != F) throw ShapeError("concat_longform: feature dimensions differ");
    T += utts[i].frames.rows();
  }
  Utterance out;
  out.id = k == 1 ? utts[begin].id : utts[begin].id + "+" + std::to_string(k);
  out.session = utts[begin].session;
  out.frames = Tensor({T, F});
  auto dst = out.frames.data().begin();
  for (std::size_t i = begin; i < begin + k; ++i) {
    dst = std::copy(utts[i].frames.data().begin(), utts[i].frames.data().end(), dst);
    out.labels.insert(out.labels.end(), utts[i].labels.begin(), utts[i].labels.end());
  }
  return out;
}

std::vector<Utterance> longform_groups(const std::vector<Utterance>& utts, std::size_t k) {
  if (k == 0) throw ConfigError("longform_groups: k must be at least 1");
  std::vector<Utterance> out;
  std::size_t i = 0;
  while (i < utts.size()) {
    std::size_t end = i;
    while (end < utts.size() && utts[end].session == utts[i].session) ++end;
    for (; i + k <= end; i += k) out.push_back(concat_longform(utts, k, i));
    i = end;
  }
  return out;
}

CorpusStats compute_stats(const std::vector<Utterance>& utts) {
  if (utts.empty()) throw ConfigError("compute_stats: empty corpus");
  const std::size_t F = utts.front().frames.cols();
  CorpusStats s{std::vector<double>(F, 0.0), std::vector<double>(F, 0.0)};
  std::size_t n = 0;
  for (const Utterance& u : utts) {
    if (u.frames.cols() != F) throw ShapeError("compute_stats: feature dimensions differ");
    for (std::size_t t = 0; t < u.frames.rows(); ++t)
      for (std::size_t f = 0; f < F; ++f) s.mean[f] += u.frames(t, f);
    n += u.frames.rows();
  }
  for (double& m : s.mean) m /= static_cast<double>(n);
  for (const Utterance& u : utts)
    for (std::size_t t = 0; t < u.frames.rows(); ++t)
      for (std::size_t f = 0; f < F; ++f) s.var[f] += (u.frames(t, f) - s.mean[f]) * (u.frames(t, f) - s.mean[f]);
  for (double& v : s.var) v /= static_cast<double>(n);
  return s;
}

namespace {

void check_stats(const Utterance& utt, const CorpusStats& stats) {
  if (stats.mean.size() != utt.frames.cols() || stats.var.size() != utt.frames.cols())
    throw ShapeError("normalize: statistics do not match the feature dimension");
  for (std::size_t f = 0; f < stats.var.size(); ++f)
    if (!(stats.var[f] > 0.0)) throw NumericError("normalize: zero variance in feature " + std::to_string(f));
}

}  // namespace

void normalize(Utterance& utt, const CorpusStats& stats) {
  check_stats(utt, stats);
  for (std::size_t t = 0; t < utt.frames.rows(); ++t)
    for (std::size_t f = 0; f < utt.frames.cols(); ++f)
      utt.frames(t, f) = (utt.frames(t, f) - stats.mean[f]) / std::sqrt(stats.var[f]);
}

void denormalize(Utterance& utt, const CorpusStats& stats) {
  check_stats(utt, stats);
  for (std::size_t t = 0; t < utt.frames.rows(); ++t)
    for (std::size_t f = 0; f < utt.frames.cols(); ++f)
      utt.frames(t, f) = utt.frames(t, f) * std::sqrt(stats.var[f]) + stats.mean[f];
}

std::pair<std::vector<Utterance>, std::vector<Utterance>> split_validation(std::vector<Utterance> utts,
                                                                           double fraction, std::uint64_t seed) {
  if (fraction < 0.0 || fraction >= 1.0) throw ConfigError("validation fraction must lie in [0, 1)");
  std::mt19937_64 rng(seed);
  std::shuffle(utts.begin(), utts.end(), rng);
  std::size_t n_valid = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(utts.size())));
  if (fraction > 0.0) n_valid = std::max<std::size_t>(n_valid, 1);
  if (n_valid >= utts.size() && !utts.empty()) throw ConfigError("validation split leaves no training data");
  std::vector<Utterance> valid(std::make_move_iterator(utts.begin()), std::make_move_iterator(utts.begin() + n_valid));
  utts.erase(utts.begin(), utts.begin() + n_valid);
  return {std::move(utts), std::move(valid)};
}

void apply_spec_masks(Utterance& utt, const std::vector<Span>& time_spans, const std::vector<Span>& freq_spans) {
  Tensor& x = utt.frames;
  const std::size_t T = x.rows(), F = x.cols();
  for (const Span& s : time_spans)
    if (s.begin + s.length > T) throw ShapeError("spec mask: time span outside the utterance");
  for (const Span& s : freq_spans)
    if (s.begin + s.length > F) throw ShapeError("spec mask: feature band outside the utterance");
  std::vector<double> mean(F, 0.0);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t f = 0; f < F; ++f) mean[f] += x(t, f) / static_cast<double>(T);
  for (const Span& s : time_spans)
    for (std::size_t t = s.begin; t < s.begin + s.length; ++t)
      for (std::size_t f = 0; f < F; ++f) x(t, f) = mean[f];
  for (const Span& s : freq_spans)
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t f = s.begin; f < s.begin + s.length; ++f) x(t, f) = mean[f];
}

void spec_mask(Utterance& utt, const SpecMaskConfig& cfg, std::mt19937_64& rng) {
  const std::size_t T = utt.frames.rows(), F = utt.frames.cols();
  auto draw = [&](std::size_t extent, std::size_t max_len) {
    max_len = std::min(max_len, extent);
    const std::size_t len = std::uniform_int_distribution<std::size_t>(0, max_len)(rng);
    const std::size_t begin = std::uniform_int_distribution<std::size_t>(0, extent - len)(rng);
    return Span{begin, len};
  };
  std::vector<Span> time, freq;
  const auto max_t = static_cast<std::size_t>(cfg.max_time_fraction * static_cast<double>(T));
  for (std::size_t i = 0; i < cfg.time_masks; ++i) time.push_back(draw(T, max_t));
  for (std::size_t i = 0; i < cfg.freq_masks; ++i) freq.push_back(draw(F, cfg.max_freq_width));
  apply_spec_masks(utt, time, freq);
}

namespace {

constexpr char kMagic[4] = {'H', 'P', 'F', '1'};

void put_u32(std::ostream& os, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v), static_cast<char>(v >> 8), static_cast<char>(v >> 16), static_cast<char>(v >> 24)};
  os.write(b, 4);
}

class Reader {
 public:
  explicit Reader(const std::filesystem::path& path) : path_(path.string()), in_(path, std::ios::binary) {
    if (!in_) throw FormatError(path_, "cannot open");
  }
  void bytes(char* dst, std::size_t n, const char* what) {
    in_.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) throw FormatError(path_, std::string("truncated ") + what);
  }
  std::uint32_t u32(const char* what) {
    unsigned char b[4];
    bytes(reinterpret_cast<char*>(b), 4, what);
    return b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  }
  bool at_end() { return in_.peek() == std::char_traits<char>::eof(); }
  const std::string& path() const { return path_; }

 private:
  std::string path_;
  std::ifstream in_;
};

std::size_t session_of(const std::string& id) {
  static const std::regex pattern(R"(s(\d+)_u\d+.*)");
  std::smatch m;
  return std::regex_match(id, m, pattern) ? std::stoul(m[1]) : 0;
}

}  // namespace

void save_features(const std::filesystem::path& path, const Utterance& utt) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError(path.string(), "cannot open for writing");
  os.write(kMagic, 4);
  put_u32(os, static_cast<std::uint32_t>(utt.frames.rows()));
  put_u32(os, static_cast<std::uint32_t>(utt.frames.cols()));
  put_u32(os, static_cast<std::uint32_t>(utt.labels.size()));
  for (double v : utt.frames.data()) put_u32(os, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  for (std::uint32_t l : utt.labels) put_u32(os, l);
  if (!os) throw FormatError(path.string(), "write failed");
}

Utterance load_features(const std::filesystem::path& path) {
  Reader r(path);
  char magic[4];
  r.bytes(magic, 4, "magic");
  if (std::memcmp(magic, "1FPH", 4) == 0) throw FormatError(r.path(), "byte-swapped magic (foreign-endian file)");
  if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError(r.path(), "not an HPF1 feature file");
  const std::uint32_t T = r.u32("header"), F = r.u32("header"), n_labels = r.u32("header");
  if (T == 0 || F == 0) throw FormatError(r.path(), "empty feature matrix");
  Utterance u;
  u.id = path.stem().string();
  u.session = session_of(u.id);
  u.frames = Tensor({T, F});
  for (double& v : u.frames.data()) {
    v = std::bit_cast<float>(r.u32("frames"));
    if (!std::isfinite(v)) throw FormatError(r.path(), "non-finite feature value");
  }
  u.labels.resize(n_labels);
  for (std::uint32_t& l : u.labels) l = r.u32("labels");
  if (!r.at_end()) throw FormatError(r.path(), "trailing bytes");
  return u;
}

std::vector<std::filesystem::path> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError(path.string(), "cannot open manifest");
  std::vector<std::filesystem::path> out;
  std::string line;
  while (std::getline(in, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
    if (line.empty()) continue;
    std::filesystem::path p(line);
    out.push_back(p.is_absolute() ? p : path.parent_path() / p);
  }
  return out;
}

void write_manifest(const std::filesystem::path& path, const std::vector<std::filesystem::path>& entries) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw FormatError(path.string(), "cannot open for writing");
  for (const auto& e : entries) os << e.string() << '\n';
}

std::vector<Utterance> load_corpus(const std::filesystem::path& manifest) {
  std::vector<Utterance> out;
  for (const auto& p : read_manifest(manifest)) out.push_back(load_features(p));
  return out;
}

}  // namespace ch4
