#include "ch4/runtime/checkpoint.hpp"

#include <bit>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <fstream>
#include <sstream>

#include "ch4/error.hpp"

namespace ch4 {

namespace {

constexpr std::uint32_t kVersion = 1;
constexpr std::uint8_t kFloat64 = 0;

class Writer {
 public:
  explicit Writer(const std::filesystem::path& path) : path_(path.string()), os_(path, std::ios::binary | std::ios::trunc) {
    if (!os_) throw FormatError(path_, "cannot open for writing");
  }
  void raw(const void* p, std::size_t n) { os_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }
  void u8(std::uint8_t v) { raw(&v, 1); }
  void u32(std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                                static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    raw(b, 4);
  }
  void f64(double d) {
    const auto v = std::bit_cast<std::uint64_t>(d);
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    raw(b, 8);
  }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
  void tensor(const std::string& name, const Tensor& t) {
    str(name);
    u8(kFloat64);
    u32(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) u32(static_cast<std::uint32_t>(d));
    for (double v : t.data()) f64(v);
  }
  void finish() {
    os_.flush();
    if (!os_) throw FormatError(path_, "write failed");
  }

 private:
  std::string path_;
  std::ofstream os_;
};

class Reader {
 public:
  explicit Reader(const std::filesystem::path& path) : path_(path.string()), in_(path, std::ios::binary) {
    if (!in_) throw FormatError(path_, "cannot open");
  }
  const std::string& path() const { return path_; }
  void raw(void* p, std::size_t n, const char* what) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) throw FormatError(path_, std::string("truncated ") + what);
  }
  std::uint8_t u8(const char* what) {
    std::uint8_t v;
    raw(&v, 1, what);
    return v;
  }
  std::uint32_t u32(const char* what) {
    unsigned char b[4];
    raw(b, 4, what);
    return b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  }
  double f64(const char* what) {
    unsigned char b[8];
    raw(b, 8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return std::bit_cast<double>(v);
  }
  std::string str(const char* what) {
    const std::uint32_t n = u32(what);
    if (n > (1u << 26)) throw FormatError(path_, std::string("implausible length for ") + what);
    std::string s(n, '\0');
    raw(s.data(), n, what);
    return s;
  }
  Tensor tensor(const std::string& name) {
    if (u8("dtype") != kFloat64) throw FormatError(path_, "tensor '" + name + "' has an unsupported dtype");
    const std::uint32_t rank = u32("rank");
    if (rank > 8) throw FormatError(path_, "tensor '" + name + "' has implausible rank");
    Shape shape(rank);
    std::size_t n = 1;
    for (auto& d : shape) n *= (d = u32("dims"));
    if (n > (std::size_t{1} << 32)) throw FormatError(path_, "tensor '" + name + "' is implausibly large");
    Tensor t(shape);
    for (double& v : t.data()) v = f64("tensor data");
    return t;
  }
  bool at_end() { return in_.peek() == std::char_traits<char>::eof(); }

 private:
  std::string path_;
  std::ifstream in_;
};

std::string model_section(const EncoderConfig& e) {
  TrainConfig c;
  c.encoder = e;
  const std::string ini = to_ini(c);
  return ini.substr(0, ini.find("[train]"));
}

}  // namespace

std::string encoder_config_mismatch(const EncoderConfig& a, const EncoderConfig& b) {
  std::istringstream sa(model_section(a)), sb(model_section(b));
  std::string la, lb;
  while (true) {
    const bool ga = static_cast<bool>(std::getline(sa, la)), gb = static_cast<bool>(std::getline(sb, lb));
    if (!ga && !gb) return {};
    if (la != lb || ga != gb) return "stored '" + la + "' vs expected '" + lb + "'";
  }
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ostringstream text;
  text << to_ini(ckpt.config) << "\n[checkpoint]\nepoch = " << ckpt.epoch << "\noptimizer_steps = " << ckpt.optimizer_steps
       << "\nrng_state = " << ckpt.rng_state << "\n";
  std::vector<std::pair<std::string, const Tensor*>> tensors;
  ckpt.model.visit([&](const std::string& name, const Tensor& t, bool) { tensors.emplace_back(name, &t); });
  Tensor mean({ckpt.stats.mean.size()}, ckpt.stats.mean), var({ckpt.stats.var.size()}, ckpt.stats.var);
  tensors.emplace_back("norm.mean", &mean);
  tensors.emplace_back("norm.var", &var);
  for (const auto& [name, t] : ckpt.adam_m) tensors.emplace_back("optim.m." + name, &t);
  for (const auto& [name, t] : ckpt.adam_v) tensors.emplace_back("optim.v." + name, &t);

  Writer w(path);
  w.raw("HPCK", 4);
  w.u32(kVersion);
  w.str(text.str());
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) w.tensor(name, *t);
  w.finish();
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  Reader r(path);
  char magic[4];
  r.raw(magic, 4, "magic");
  if (std::string(magic, 4) != "HPCK") throw FormatError(r.path(), "not a checkpoint file");
  const std::uint32_t version = r.u32("version");
  if (version != kVersion) throw FormatError(r.path(), "unsupported checkpoint version " + std::to_string(version));
  const std::string text = r.str("config");

  Checkpoint ckpt;
  try {
    ckpt.config = parse_config(text);
  } catch (const ConfigError& e) {
    throw FormatError(r.path(), std::string("invalid stored config: ") + e.what());
  }
  boost::property_tree::ptree root;
  std::istringstream in(text);
  boost::property_tree::read_ini(in, root);
  ckpt.epoch = root.get<std::size_t>("checkpoint.epoch", 0);
  ckpt.optimizer_steps = root.get<std::size_t>("checkpoint.optimizer_steps", 0);
  ckpt.rng_state = root.get<std::string>("checkpoint.rng_state", "");

  std::map<std::string, Tensor> stored;
  const std::uint32_t count = r.u32("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str("tensor name");
    Tensor t = r.tensor(name);
    stored.emplace(std::move(name), std::move(t));
  }
  if (!r.at_end()) throw FormatError(r.path(), "trailing bytes");

  auto take = [&](const std::string& name, const Shape* shape) {
    auto it = stored.find(name);
    if (it == stored.end()) throw MissingTensorError(r.path(), name);
    if (shape && it->second.shape() != *shape)
      throw FormatError(r.path(), "tensor '" + name + "' has shape " + shape_string(it->second.shape()) + ", expected " +
                                      shape_string(*shape));
    Tensor t = std::move(it->second);
    stored.erase(it);
    return t;
  };

  std::mt19937_64 scratch(0);
  ckpt.model = Encoder::random(ckpt.config.encoder, scratch);
  ckpt.model.visit([&](const std::string& name, Tensor& t, bool) { t = take(name, &t.shape()); });
  const Shape stat_shape{ckpt.config.encoder.feature_dim};
  const Tensor mean = take("norm.mean", &stat_shape), var = take("norm.var", &stat_shape);
  ckpt.stats.mean = mean.values();
  ckpt.stats.var = var.values();
  for (auto it = stored.begin(); it != stored.end();) {
    const std::string& name = it->first;
    if (name.rfind("optim.m.", 0) == 0) {
      ckpt.adam_m.emplace(name.substr(8), std::move(it->second));
    } else if (name.rfind("optim.v.", 0) == 0) {
      ckpt.adam_v.emplace(name.substr(8), std::move(it->second));
    } else {
      throw FormatError(r.path(), "unexpected tensor '" + name + "'");
    }
    it = stored.erase(it);
  }
  return ckpt;
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const EncoderConfig& expected) {
  Checkpoint ckpt = load_checkpoint(path);
  if (const std::string diff = encoder_config_mismatch(ckpt.config.encoder, expected); !diff.empty())
    throw ConfigError(path.string() + ": model configuration mismatch: " + diff);
  return ckpt;
}

}  // namespace ch4
