#include "cardiovae/data.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <boost/math/distributions/normal.hpp>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>
#include <tuple>

namespace cardiovae {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Samples

void PairedSample::validate() const {
  if (!image && !signal) throw Error(ErrorKind::invalid, "sample '" + id + "' has no modality");
  if (image) {
    if (image->rank() != 3) throw ShapeError("rank", "sample '" + id + "' image must be (h, w, c)");
    for (float v : image->values())
      if (!(v >= 0.0f && v <= 1.0f)) throw Error(ErrorKind::invalid, "sample '" + id + "' image pixels outside [0, 1]");
  }
  if (signal) {
    if (signal->rank() != 2 || signal->dim(0) != 1) throw ShapeError("rank", "sample '" + id + "' signal must be (1, L)");
    signal->require_finite("sample '" + id + "' signal");
  }
  if (label && *label != 0 && *label != 1) throw Error(ErrorKind::invalid, "sample '" + id + "' label must be 0 or 1");
}

std::vector<int> dataset_labels(const Dataset& ds) {
  std::vector<int> out;
  out.reserve(ds.size());
  for (const auto& s : ds) {
    if (!s.label) throw Error(ErrorKind::invalid, "sample '" + s.id + "' has no label");
    out.push_back(*s.label);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic benchmark

void SynthConfig::validate() const {
  if (n < 2) throw Error(ErrorKind::config, "synthetic n must be >= 2");
  if (shared_dim < 1) throw Error(ErrorKind::config, "shared_dim must be >= 1");
  if (!(image_noise >= 0) || !(signal_noise >= 0) || !(view_noise >= 0))
    throw Error(ErrorKind::config, "noise levels must be >= 0");
  if (positive_fraction && !(*positive_fraction > 0.0 && *positive_fraction < 1.0))
    throw Error(ErrorKind::config, "positive_fraction must be in (0, 1)");
  if (image_h < 1 || image_w < 1 || image_c < 1 || signal_len < 1)
    throw Error(ErrorKind::config, "synthetic dims must be positive");
}

double SynthConfig::effective_threshold() const {
  if (!positive_fraction) return threshold;
  return boost::math::quantile(boost::math::normal_distribution<double>(), 1.0 - *positive_fraction);
}

std::uint64_t SynthConfig::effective_noise_seed() const {
  return noise_seed ? *noise_seed : seed ^ 0x9e3779b97f4a7c15ULL;
}

namespace {

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

}  // namespace

Tensor render_image(const SynthConfig& cfg, double view_score, double u_img, std::mt19937_64& noise_rng) {
  const std::size_t h = cfg.image_h, w = cfg.image_w, c = cfg.image_c;
  const double grow = std::exp(0.15 * view_score);
  const double ax = std::min(0.25 * w * grow, 0.48 * w);
  const double ay = std::min(0.20 * h * grow, 0.48 * h);
  const double cx = (w - 1) / 2.0, cy = (h - 1) / 2.0;
  const double theta = std::numbers::pi * normal_cdf(u_img);
  const double period = std::max(4.0, w / 8.0);
  const double ct = std::cos(theta), st = std::sin(theta);

  Tensor img({h, w, c});
  std::normal_distribution<double> noise;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double dx = (x - cx) / ax, dy = (y - cy) / ay;
      double v;
      if (dx * dx + dy * dy <= 1.0) {
        v = 1.0;
      } else {
        const double p = x * ct + y * st;
        const double m = p - period * std::floor(p / period);
        v = m < period / 6.0 ? 1.0 : 0.0;
      }
      for (std::size_t k = 0; k < c; ++k) {
        const double e = noise(noise_rng);
        img[(y * w + x) * c + k] = static_cast<float>(std::clamp(v + cfg.image_noise * e, 0.0, 1.0));
      }
    }
  return img;
}

Tensor render_signal(const SynthConfig& cfg, double view_score, double u_sig, std::mt19937_64& noise_rng) {
  const std::size_t L = cfg.signal_len;
  const double interval = std::max(2.0, L / 16.0 * std::exp(-0.15 * view_score));
  const double amp = std::exp(0.25 * view_score);
  const double width = std::clamp(interval / 8.0, 2.0, 12.0);
  const double phase = interval / 2.0;
  const double reach = std::ceil(6.0 * width / interval);  // spikes beyond 6 widths contribute nothing measurable

  Tensor sig({1, L});
  std::normal_distribution<double> noise;
  for (std::size_t t = 0; t < L; ++t) {
    const double k0 = std::floor((t - phase) / interval);
    double v = 0;
    for (double k = k0 - reach; k <= k0 + reach + 1; k += 1) {
      const double tk = phase + k * interval;
      if (tk < 0) continue;
      const double d = (t - tk) / width;
      v += amp * std::exp(-0.5 * d * d);
    }
    const double drift = L > 1 ? 0.25 * u_sig * (2.0 * t / (L - 1) - 1.0) : 0.0;
    sig[t] = static_cast<float>(v + drift + cfg.signal_noise * noise(noise_rng));
  }
  return sig;
}

std::vector<double> synth_scores(const SynthConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> normal;
  std::vector<double> scores(cfg.n);
  const double norm = 1.0 / std::sqrt(static_cast<double>(cfg.shared_dim));
  for (auto& s : scores) {
    double sum = 0;
    for (std::size_t j = 0; j < cfg.shared_dim; ++j) sum += normal(rng);
    s = sum * norm;
  }
  return scores;
}

Dataset synth_generate(const SynthConfig& cfg, std::vector<SynthFactors>* factors) {
  const auto scores = synth_scores(cfg);
  const double thr = cfg.effective_threshold();
  std::mt19937_64 rng(cfg.effective_noise_seed());
  std::normal_distribution<double> normal;

  const int width = std::max<int>(4, static_cast<int>(std::to_string(cfg.n - 1).size()));
  Dataset ds;
  ds.reserve(cfg.n);
  if (factors) factors->clear();
  for (std::size_t i = 0; i < cfg.n; ++i) {
    SynthFactors f;
    f.score = scores[i];
    f.u_img = normal(rng);
    f.u_sig = normal(rng);
    f.view_img = f.score + cfg.view_noise * normal(rng);
    f.view_sig = f.score + cfg.view_noise * normal(rng);

    char id[32];
    std::snprintf(id, sizeof id, "s%0*zu", width, i);
    PairedSample s;
    s.id = id;
    s.image = render_image(cfg, f.view_img, f.u_img, rng);
    s.signal = render_signal(cfg, f.view_sig, f.u_sig, rng);
    s.label = f.score > thr ? 1 : 0;
    ds.push_back(std::move(s));
    if (factors) factors->push_back(f);
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Binary formats

namespace {

template <typename U>
void put(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff));
}

struct Reader {
  const std::string& bytes;
  std::size_t& offset;

  std::size_t remaining() const { return bytes.size() - offset; }

  void need(std::size_t n, const char* what) const {
    if (remaining() < n)
      throw FormatError(FormatFault::truncated, std::string("file ends inside ") + what + " at byte " +
                                                    std::to_string(offset));
  }

  template <typename U>
  U get(const char* what) {
    need(sizeof(U), what);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[offset + i])) << (8 * i);
    offset += sizeof(U);
    return static_cast<U>(v);
  }

  std::string take(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes.substr(offset, n);
    offset += n;
    return s;
  }
};

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::io, "cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw Error(ErrorKind::io, "read failed for '" + path.string() + "'");
  return std::move(ss).str();
}

void spit(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::io, "cannot write '" + path.string() + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorKind::io, "write failed for '" + path.string() + "'");
}

constexpr std::uint32_t kMaxRank = 32;

}  // namespace

std::string encode_tensor(const Tensor& t) {
  std::string out = "TNSR";
  out.reserve(16 + 8 * t.rank() + 4 * t.size());
  put<std::uint32_t>(out, kTensorVersion);
  put<std::uint32_t>(out, 0);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.dims()) put<std::uint64_t>(out, d);
  for (float v : t.values()) put<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
  return out;
}

Tensor decode_tensor(const std::string& bytes, std::size_t& offset) {
  Reader r{bytes, offset};
  const std::string magic = r.take(4, "tensor magic");
  if (magic != "TNSR") throw FormatError(FormatFault::bad_magic, "expected \"TNSR\"");
  const auto version = r.get<std::uint32_t>("tensor header");
  if (version != kTensorVersion) throw FormatError(FormatFault::bad_version, "tensor version " + std::to_string(version));
  const auto dtype = r.get<std::uint32_t>("tensor header");
  if (dtype != 0) throw FormatError(FormatFault::bad_dtype, "dtype " + std::to_string(dtype) + " (only 0 = f32)");
  const auto ndims = r.get<std::uint32_t>("tensor header");
  if (ndims == 0) throw FormatError(FormatFault::empty_dims, "tensor has no dims");
  if (ndims > kMaxRank) throw FormatError(FormatFault::dim_overflow, "rank " + std::to_string(ndims));
  Dims dims(ndims);
  std::size_t count = 1;
  for (auto& d : dims) {
    const auto v = r.get<std::uint64_t>("tensor dims");
    if (v == 0) throw FormatError(FormatFault::empty_dims, "zero-length dim");
    if (__builtin_mul_overflow(count, static_cast<std::size_t>(v), &count) || count > (SIZE_MAX / 4))
      throw FormatError(FormatFault::dim_overflow, "element count overflows");
    d = static_cast<std::size_t>(v);
  }
  r.need(count * 4, "tensor payload");
  std::vector<float> data(count);
  for (auto& v : data) v = std::bit_cast<float>(r.get<std::uint32_t>("tensor payload"));
  return Tensor(std::move(dims), std::move(data));
}

void write_tensor(const fs::path& path, const Tensor& t) { spit(path, encode_tensor(t)); }

Tensor read_tensor(const fs::path& path) {
  const std::string bytes = slurp(path);
  std::size_t off = 0;
  Tensor t = decode_tensor(bytes, off);
  if (off != bytes.size())
    throw FormatError(FormatFault::bad_entry, std::to_string(bytes.size() - off) + " trailing bytes in '" +
                                                  path.string() + "'");
  return t;
}

std::string arch_echo(const ArchConfig& a) {
  char drop[40];
  std::snprintf(drop, sizeof drop, "%.17g", a.head_dropout);
  std::ostringstream s;
  s << "image_h = " << a.image_h << "\n"
    << "image_w = " << a.image_w << "\n"
    << "image_c = " << a.image_c << "\n"
    << "signal_len = " << a.signal_len << "\n"
    << "channels = " << a.channels[0] << "," << a.channels[1] << "," << a.channels[2] << "\n"
    << "latent_dim = " << a.latent_dim << "\n"
    << "head_hidden = " << a.head_hidden << "\n"
    << "head_dropout = " << drop << "\n";
  return s.str();
}

namespace {

const char* const kArchKeys[] = {"image_h",    "image_w",     "image_c",     "signal_len",
                                 "channels",   "latent_dim",  "head_hidden", "head_dropout"};

std::size_t parse_size(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  unsigned long long x = 0;
  try {
    x = std::stoull(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos == 0 || pos != v.size() || v[0] == '-') throw FormatError(FormatFault::bad_entry, key + " = '" + v + "'");
  return static_cast<std::size_t>(x);
}

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

std::map<std::string, std::string> parse_echo(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError(FormatFault::bad_entry, "config echo line '" + line + "'");
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

}  // namespace

ArchConfig parse_arch_echo(const std::map<std::string, std::string>& kv) {
  for (const char* k : kArchKeys)
    if (!kv.count(k)) throw FormatError(FormatFault::bad_entry, std::string("config echo lacks '") + k + "'");
  ArchConfig a;
  a.image_h = parse_size("image_h", kv.at("image_h"));
  a.image_w = parse_size("image_w", kv.at("image_w"));
  a.image_c = parse_size("image_c", kv.at("image_c"));
  a.signal_len = parse_size("signal_len", kv.at("signal_len"));
  a.latent_dim = parse_size("latent_dim", kv.at("latent_dim"));
  a.head_hidden = parse_size("head_hidden", kv.at("head_hidden"));
  const std::string ch = kv.at("channels");
  std::istringstream cs(ch);
  std::string part;
  std::size_t i = 0;
  while (std::getline(cs, part, ',')) {
    if (i >= 3) throw FormatError(FormatFault::bad_entry, "channels = '" + ch + "'");
    a.channels[i++] = parse_size("channels", trim(part));
  }
  if (i != 3) throw FormatError(FormatFault::bad_entry, "channels = '" + ch + "'");
  try {
    std::size_t pos = 0;
    a.head_dropout = std::stod(kv.at("head_dropout"), &pos);
    if (pos != kv.at("head_dropout").size()) throw std::invalid_argument("tail");
  } catch (const std::exception&) {
    throw FormatError(FormatFault::bad_entry, "head_dropout = '" + kv.at("head_dropout") + "'");
  }
  return a;
}

std::string encode_checkpoint(const Checkpoint& ck) {
  ck.params.validate(make_layout(ck.arch));
  std::string out = "CVXG";
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(ck.params.tensors().size()));
  for (const auto& [name, t] : ck.params.tensors()) {
    if (name.empty() || name.size() > 0xffff) throw Error(ErrorKind::invalid, "bad tensor name length");
    put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out += name;
    out += encode_tensor(t);
  }
  std::string echo = arch_echo(ck.arch) + "seed = " + std::to_string(ck.seed) + "\n";
  for (const auto& [k, v] : ck.extra) {
    if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos)
      throw Error(ErrorKind::invalid, "checkpoint echo entry '" + k + "' cannot be encoded");
    echo += k + " = " + v + "\n";
  }
  put<std::uint32_t>(out, static_cast<std::uint32_t>(echo.size()));
  out += echo;
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes, const std::optional<ArchConfig>& expected) {
  std::size_t off = 0;
  Reader r{bytes, off};
  if (r.take(4, "checkpoint magic") != "CVXG") throw FormatError(FormatFault::bad_magic, "expected \"CVXG\"");
  const auto version = r.get<std::uint32_t>("checkpoint header");
  if (version != kCheckpointVersion)
    throw FormatError(FormatFault::bad_version, "checkpoint version " + std::to_string(version));
  const auto count = r.get<std::uint32_t>("checkpoint header");

  Checkpoint ck;
  for (std::uint32_t e = 0; e < count; ++e) {
    const auto len = r.get<std::uint16_t>("entry name length");
    if (len == 0) throw FormatError(FormatFault::bad_entry, "empty tensor name in entry " + std::to_string(e));
    std::string name = r.take(len, "entry name");
    if (ck.params.contains(name)) throw FormatError(FormatFault::bad_entry, "duplicate tensor '" + name + "'");
    ck.params.set(name, decode_tensor(bytes, off));
  }
  const auto echo_len = r.get<std::uint32_t>("config echo length");
  auto kv = parse_echo(r.take(echo_len, "config echo"));
  if (off != bytes.size())
    throw FormatError(FormatFault::bad_entry, std::to_string(bytes.size() - off) + " trailing bytes after config echo");

  ck.arch = parse_arch_echo(kv);
  if (!kv.count("seed")) throw FormatError(FormatFault::bad_entry, "config echo lacks 'seed'");
  ck.seed = parse_size("seed", kv.at("seed"));
  for (const char* k : kArchKeys) kv.erase(k);
  kv.erase("seed");
  ck.extra = std::move(kv);

  if (expected && !(*expected == ck.arch))
    throw FormatError(FormatFault::arch_mismatch, "checkpoint arch differs from the requested one:\n" + arch_echo(ck.arch) +
                                                      "requested:\n" + arch_echo(*expected));
  const auto layout = make_layout(ck.arch);
  std::map<std::string, Dims> want;
  for (const auto& [layer, spec] : layout.layers()) {
    want[layer + ".weight"] = weight_dims(spec);
    want[layer + ".bias"] = bias_dims(spec);
  }
  for (const auto& [name, dims] : want) {
    if (!ck.params.contains(name)) throw FormatError(FormatFault::missing_tensor, "'" + name + "'");
    if (ck.params.at(name).dims() != dims)
      throw FormatError(FormatFault::bad_entry, "'" + name + "' has dims " + dims_string(ck.params.at(name).dims()) +
                                                    ", expected " + dims_string(dims));
  }
  for (const auto& [name, _] : ck.params.tensors())
    if (!want.count(name)) throw FormatError(FormatFault::bad_entry, "unexpected tensor '" + name + "'");
  return ck;
}

void write_checkpoint(const fs::path& path, const Checkpoint& ck) { spit(path, encode_checkpoint(ck)); }

Checkpoint read_checkpoint(const fs::path& path, const std::optional<ArchConfig>& expected) {
  return decode_checkpoint(slurp(path), expected);
}

// ---------------------------------------------------------------------------
// Manifests

namespace {

bool safe_id(const std::string& id) {
  if (id.empty()) return false;
  return std::all_of(id.begin(), id.end(), [](char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.';
  });
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

fs::path resolve(const fs::path& base, const std::string& p) {
  const fs::path q(p);
  return q.is_absolute() ? q : base / q;
}

Tensor as_signal_row(const Tensor& t, const std::string& id) {
  const auto& d = t.dims();
  if (d.size() == 1) return t.reshaped({1, d[0]});
  if (d.size() == 2 && (d[0] == 1 || d[1] == 1)) return t.reshaped({1, t.size()});
  throw ShapeError("rank", "signal for '" + id + "' has dims " + dims_string(d));
}

Tensor as_image(const Tensor& t, const std::string& id) {
  const auto& d = t.dims();
  if (d.size() == 2) return t.reshaped({d[0], d[1], 1});
  if (d.size() == 3) return t;
  throw ShapeError("rank", "image for '" + id + "' has dims " + dims_string(d));
}

}  // namespace

void write_dataset(const fs::path& dir, const Dataset& ds) {
  fs::create_directories(dir);
  std::ostringstream csv;
  csv << "id,image_path,signal_path,label\n";
  for (const auto& s : ds) {
    if (!safe_id(s.id)) throw Error(ErrorKind::invalid, "sample id '" + s.id + "' is not filename-safe");
    s.validate();
    std::string img, sig;
    if (s.image) {
      img = "images/" + s.id + ".tnsr";
      write_tensor(dir / img, *s.image);
    }
    if (s.signal) {
      sig = "signals/" + s.id + ".tnsr";
      write_tensor(dir / sig, *s.signal);
    }
    csv << s.id << ',' << img << ',' << sig << ',' << (s.label ? std::to_string(*s.label) : "") << '\n';
  }
  spit(dir / kManifestName, csv.str());
}

Dataset read_dataset(const fs::path& manifest_or_dir) {
  const fs::path manifest = fs::is_directory(manifest_or_dir) ? manifest_or_dir / kManifestName : manifest_or_dir;
  const fs::path base = manifest.parent_path();
  std::istringstream in(slurp(manifest));
  std::string line;
  if (!std::getline(in, line) || trim(line) != "id,image_path,signal_path,label")
    throw Error(ErrorKind::io, manifest.string() + ":1: expected header 'id,image_path,signal_path,label'");
  Dataset ds;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    const auto f = split_csv(line);
    const std::string where = manifest.string() + ":" + std::to_string(lineno) + ": ";
    if (f.size() != 4) throw Error(ErrorKind::io, where + "expected 4 fields, got " + std::to_string(f.size()));
    PairedSample s;
    s.id = trim(f[0]);
    if (s.id.empty()) throw Error(ErrorKind::io, where + "empty id");
    if (!trim(f[1]).empty()) s.image = as_image(read_tensor(resolve(base, trim(f[1]))), s.id);
    if (!trim(f[2]).empty()) s.signal = as_signal_row(read_tensor(resolve(base, trim(f[2]))), s.id);
    const std::string lab = trim(f[3]);
    if (lab == "0" || lab == "1") s.label = lab == "1" ? 1 : 0;
    else if (!lab.empty()) throw Error(ErrorKind::io, where + "label must be 0, 1 or empty");
    try {
      s.validate();
    } catch (const Error& e) {
      throw Error(ErrorKind::io, where + e.what());
    }
    ds.push_back(std::move(s));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Splits

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> ratio_split(std::size_t n, double fraction,
                                                                          std::uint64_t seed) {
  if (n < 2) throw Error(ErrorKind::invalid, "ratio split needs at least 2 samples");
  if (!(fraction > 0.0 && fraction < 1.0)) throw Error(ErrorKind::invalid, "split fraction must be in (0, 1)");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  const auto first = std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(n * fraction)), 1, n - 1);
  std::vector<std::size_t> a(idx.begin(), idx.begin() + first), b(idx.begin() + first, idx.end());
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  return {a, b};
}

namespace {

std::array<std::vector<std::size_t>, 2> by_class(const std::vector<int>& labels) {
  std::array<std::vector<std::size_t>, 2> c;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw Error(ErrorKind::invalid, "labels must be 0 or 1");
    c[labels[i]].push_back(i);
  }
  return c;
}

}  // namespace

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> stratified_ratio_split(const std::vector<int>& labels,
                                                                                     double fraction,
                                                                                     std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw Error(ErrorKind::invalid, "split fraction must be in (0, 1)");
  auto classes = by_class(labels);
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> a, b;
  for (auto& c : classes) {
    std::shuffle(c.begin(), c.end(), rng);
    const auto first = std::min<std::size_t>(static_cast<std::size_t>(std::llround(c.size() * fraction)), c.size());
    a.insert(a.end(), c.begin(), c.begin() + first);
    b.insert(b.end(), c.begin() + first, c.end());
  }
  if (a.empty() || b.empty()) throw Error(ErrorKind::invalid, "stratified split leaves an empty part");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  return {a, b};
}

std::vector<std::vector<std::size_t>> stratified_kfold(const std::vector<int>& labels, std::size_t k,
                                                       std::uint64_t seed) {
  if (k < 2) throw Error(ErrorKind::invalid, "k-fold needs k >= 2");
  auto classes = by_class(labels);
  for (int c = 0; c < 2; ++c)
    if (classes[c].size() < k)
      throw Error(ErrorKind::invalid, "impossible stratification: class " + std::to_string(c) + " has " +
                                          std::to_string(classes[c].size()) + " samples for " + std::to_string(k) +
                                          " folds");
  std::mt19937_64 rng(seed);
  std::vector<std::vector<std::size_t>> folds(k);
  std::size_t counter = 0;
  for (auto& c : classes) {
    std::shuffle(c.begin(), c.end(), rng);
    for (auto i : c) folds[counter++ % k].push_back(i);
  }
  for (auto& f : folds) std::sort(f.begin(), f.end());
  return folds;
}

// ---------------------------------------------------------------------------
// Pairing

std::vector<ManifestRecord> read_time_manifest(const fs::path& path) {
  std::istringstream in(slurp(path));
  std::string line;
  if (!std::getline(in, line) || trim(line) != "subject_id,timestamp,path")
    throw Error(ErrorKind::io, path.string() + ":1: expected header 'subject_id,timestamp,path'");
  std::vector<ManifestRecord> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    const auto f = split_csv(line);
    const std::string where = path.string() + ":" + std::to_string(lineno) + ": ";
    if (f.size() != 3) throw Error(ErrorKind::io, where + "expected 3 fields");
    ManifestRecord r;
    r.subject = trim(f[0]);
    if (r.subject.empty()) throw Error(ErrorKind::io, where + "empty subject id");
    const std::string ts = trim(f[1]);
    std::size_t pos = 0;
    try {
      r.time = std::stod(ts, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos == 0 || pos != ts.size() || !std::isfinite(r.time))
      throw Error(ErrorKind::io, where + "timestamp '" + ts + "' is not a number");
    r.path = resolve(path.parent_path(), trim(f[2]));
    out.push_back(std::move(r));
  }
  return out;
}

Dataset pair_by_key(const fs::path& image_manifest, const fs::path& signal_manifest, double window) {
  if (!(window >= 0)) throw Error(ErrorKind::invalid, "pairing window must be >= 0");
  const auto imgs = read_time_manifest(image_manifest);
  const auto sigs = read_time_manifest(signal_manifest);

  struct Candidate {
    double dt;
    std::size_t i, j;
  };
  std::vector<Candidate> cands;
  for (std::size_t i = 0; i < imgs.size(); ++i)
    for (std::size_t j = 0; j < sigs.size(); ++j) {
      if (imgs[i].subject != sigs[j].subject) continue;
      const double dt = std::abs(imgs[i].time - sigs[j].time);
      if (dt <= window) cands.push_back({dt, i, j});
    }
  std::sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
    return std::tie(a.dt, a.i, a.j) < std::tie(b.dt, b.i, b.j);
  });
  std::vector<bool> used_i(imgs.size()), used_j(sigs.size());
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (const auto& c : cands) {
    if (used_i[c.i] || used_j[c.j]) continue;
    used_i[c.i] = used_j[c.j] = true;
    pairs.emplace_back(c.i, c.j);
  }
  std::sort(pairs.begin(), pairs.end(), [&](const auto& a, const auto& b) {
    return std::tie(imgs[a.first].subject, imgs[a.first].time, a.first) <
           std::tie(imgs[b.first].subject, imgs[b.first].time, b.first);
  });

  Dataset ds;
  std::vector<std::string> failed;
  std::map<std::string, std::size_t> per_subject;
  for (const auto& [i, j] : pairs) {
    PairedSample s;
    s.id = imgs[i].subject + "_" + std::to_string(per_subject[imgs[i].subject]++);
    try {
      s.image = as_image(read_tensor(imgs[i].path), s.id);
      s.signal = as_signal_row(read_tensor(sigs[j].path), s.id);
      s.validate();
    } catch (const Error&) {
      failed.push_back(s.id);
      continue;
    }
    ds.push_back(std::move(s));
  }
  if (!failed.empty()) {
    std::string list;
    for (const auto& id : failed) list += (list.empty() ? "" : ", ") + id;
    throw Error(ErrorKind::io, "unreadable files for paired ids: " + list);
  }
  return ds;
}

}  // namespace cardiovae
