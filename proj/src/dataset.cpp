#include "vitprune/dataset.hpp"

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

#include "vitprune/random.hpp"

namespace vp {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// DomainDataset

void DomainDataset::validate() const {
  std::vector<std::string> errors;
  if (classes.size() < 2) errors.push_back("need at least 2 classes");
  if (domains.empty()) errors.push_back("need at least 1 domain");
  if (channels != 1 && channels != 3) errors.push_back("channels must be 1 or 3");
  if (image_size <= 0) errors.push_back("image_size must be positive");
  const auto expect = static_cast<std::size_t>(channels * image_size * image_size);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    if (s.pixels.size() != expect) {
      errors.push_back("sample " + std::to_string(i) + " has " + std::to_string(s.pixels.size()) + " values, expected " +
                       std::to_string(expect));
      break;
    }
    if (s.label < 0 || s.label >= static_cast<int>(classes.size()) || s.domain < 0 ||
        s.domain >= static_cast<int>(domains.size())) {
      errors.push_back("sample " + std::to_string(i) + " has an out-of-range label or domain");
      break;
    }
  }
  if (!errors.empty()) {
    std::string msg = "invalid dataset:";
    for (const auto& e : errors) msg += " " + e + ";";
    throw std::invalid_argument(msg);
  }
}

void DomainDataset::compute_normalization() {
  mean.assign(channels, 0.0);
  stddev.assign(channels, 1.0);
  if (samples.empty()) return;
  const std::int64_t plane = image_size * image_size;
  std::vector<double> sum(channels, 0.0), sq(channels, 0.0);
  for (const auto& s : samples) {
    for (std::int64_t c = 0; c < channels; ++c) {
      for (std::int64_t i = 0; i < plane; ++i) {
        const double v = s.pixels[c * plane + i];
        sum[c] += v;
        sq[c] += v * v;
      }
    }
  }
  const double n = static_cast<double>(samples.size() * plane);
  for (std::int64_t c = 0; c < channels; ++c) {
    mean[c] = sum[c] / n;
    const double var = std::max(sq[c] / n - mean[c] * mean[c], 0.0);
    stddev[c] = var > 1e-12 ? std::sqrt(var) : 1.0;
  }
}

Tensor DomainDataset::images(std::span<const std::size_t> indices, const std::vector<bool>* flip) const {
  const std::int64_t s = image_size, plane = s * s;
  const auto n = static_cast<std::int64_t>(indices.size());
  std::vector<double> out(static_cast<std::size_t>(n * channels * plane));
  for (std::int64_t b = 0; b < n; ++b) {
    const auto& px = samples.at(indices[b]).pixels;
    const bool mirror = flip && (*flip)[b];
    for (std::int64_t c = 0; c < channels; ++c) {
      const double m = mean.empty() ? 0.0 : mean[c];
      const double sd = stddev.empty() ? 1.0 : stddev[c];
      for (std::int64_t y = 0; y < s; ++y) {
        for (std::int64_t x = 0; x < s; ++x) {
          const std::int64_t src = c * plane + y * s + (mirror ? s - 1 - x : x);
          out[((b * channels + c) * s + y) * s + x] = (px[src] - m) / sd;
        }
      }
    }
  }
  return Tensor::from_data({n, channels, s, s}, std::move(out));
}

std::vector<int> DomainDataset::labels(std::span<const std::size_t> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(samples.at(i).label);
  return out;
}

Json DomainDataset::summary() const {
  std::vector<std::int64_t> per_domain(domains.size(), 0);
  for (const auto& s : samples) ++per_domain[s.domain];
  Json d = Json::object();
  for (std::size_t i = 0; i < domains.size(); ++i) d[domains[i]] = per_domain[i];
  return Json{{"provenance", provenance}, {"classes", classes},     {"domains", domains},
              {"channels", channels},     {"image_size", image_size}, {"samples", samples.size()},
              {"per_domain", d},          {"mean", mean},           {"std", stddev}};
}

// ---------------------------------------------------------------------------
// Synthetic generator

void SynthConfig::validate() const {
  std::vector<std::string> errors;
  if (classes < 2 || classes > static_cast<int>(synth_class_names().size())) {
    errors.push_back("classes must be in [2, " + std::to_string(synth_class_names().size()) + "]");
  }
  if (domains < 2 || domains > static_cast<int>(synth_domain_names().size())) {
    errors.push_back("domains must be in [2, " + std::to_string(synth_domain_names().size()) + "]");
  }
  if (images_per_domain < classes) errors.push_back("images_per_domain must be >= classes");
  if (image_size < 8) errors.push_back("image_size must be >= 8");
  if (!errors.empty()) {
    std::string msg = "invalid synthetic data config:";
    for (const auto& e : errors) msg += " " + e + ";";
    throw std::invalid_argument(msg);
  }
}

const std::vector<std::string>& synth_class_names() {
  static const std::vector<std::string> names{"circle", "square", "triangle", "diamond", "cross", "ring", "frame"};
  return names;
}

const std::vector<std::string>& synth_domain_names() {
  static const std::vector<std::string> names{"photo", "texture", "cartoon", "sketch"};
  return names;
}

namespace {

struct Rgb {
  double r, g, b;
};

Rgb random_color(Rng& rng, double lo, double hi) { return {rng.uniform(lo, hi), rng.uniform(lo, hi), rng.uniform(lo, hi)}; }

// Shape membership in normalized coordinates (u right, v down, unit radius).
bool inside(int shape, double u, double v) {
  const double au = std::abs(u), av = std::abs(v), r2 = u * u + v * v;
  switch (shape) {
    case 0: return r2 <= 1.0;
    case 1: return std::max(au, av) <= 0.8;
    case 2: return v >= -0.85 && v <= 0.8 && au <= (v + 0.85) / 1.65;
    case 3: return au + av <= 1.0;
    case 4: return (au <= 0.3 && av <= 1.0) || (av <= 0.3 && au <= 1.0);
    case 5: return r2 <= 1.0 && r2 >= 0.5;
    case 6: {
      const double m = std::max(au, av);
      return m <= 0.9 && m >= 0.55;
    }
  }
  return false;
}

std::vector<double> render(int shape, int style, std::int64_t size, Rng& rng) {
  const double scale = static_cast<double>(size) / 32.0;
  const double cx = size / 2.0 + rng.uniform(-4, 4) * scale;
  const double cy = size / 2.0 + rng.uniform(-4, 4) * scale;
  const double radius = rng.uniform(8, 12) * scale;
  std::vector<char> mask(size * size);
  for (std::int64_t y = 0; y < size; ++y) {
    for (std::int64_t x = 0; x < size; ++x) {
      mask[y * size + x] = inside(shape, (x + 0.5 - cx) / radius, (y + 0.5 - cy) / radius);
    }
  }
  auto at = [&](std::int64_t x, std::int64_t y) {
    return x >= 0 && y >= 0 && x < size && y < size && mask[y * size + x];
  };
  auto edge = [&](std::int64_t x, std::int64_t y) {
    return at(x, y) && !(at(x - 1, y) && at(x + 1, y) && at(x, y - 1) && at(x, y + 1));
  };

  const std::int64_t plane = size * size;
  std::vector<double> px(3 * plane);
  auto put = [&](std::int64_t x, std::int64_t y, Rgb c) {
    px[y * size + x] = c.r;
    px[plane + y * size + x] = c.g;
    px[2 * plane + y * size + x] = c.b;
  };

  switch (style) {
    case 0: {  // photo: gradient background, solid object, sensor noise
      const Rgb top = random_color(rng, 0.2, 0.8), bottom = random_color(rng, 0.2, 0.8);
      const Rgb obj = random_color(rng, 0.0, 1.0);
      for (std::int64_t y = 0; y < size; ++y) {
        const double t = static_cast<double>(y) / (size - 1);
        for (std::int64_t x = 0; x < size; ++x) {
          Rgb c = at(x, y) ? obj
                           : Rgb{top.r + t * (bottom.r - top.r), top.g + t * (bottom.g - top.g),
                                 top.b + t * (bottom.b - top.b)};
          c.r += 0.05 * rng.normal();
          c.g += 0.05 * rng.normal();
          c.b += 0.05 * rng.normal();
          put(x, y, c);
        }
      }
      break;
    }
    case 1: {  // texture: striped background, checkered object
      const Rgb b0 = random_color(rng, 0.3, 0.7), b1 = random_color(rng, 0.3, 0.7);
      const Rgb o0 = random_color(rng, 0.0, 1.0), o1 = random_color(rng, 0.0, 1.0);
      const auto period = static_cast<std::int64_t>(3 + rng.below(3));
      const auto cell = static_cast<std::int64_t>(2 + rng.below(2));
      for (std::int64_t y = 0; y < size; ++y) {
        for (std::int64_t x = 0; x < size; ++x) {
          if (at(x, y)) {
            put(x, y, ((x / cell + y / cell) % 2) ? o0 : o1);
          } else {
            put(x, y, (((x + y) / period) % 2) ? b0 : b1);
          }
        }
      }
      break;
    }
    case 2: {  // cartoon: flat pastel background, saturated fill, dark outline
      const Rgb bg = random_color(rng, 0.7, 1.0);
      Rgb fill{0, 0, 0};
      const int hue = static_cast<int>(rng.below(6));
      const double hi = rng.uniform(0.8, 1.0), lo = rng.uniform(0.0, 0.2);
      fill.r = (hue == 0 || hue == 1 || hue == 5) ? hi : lo;
      fill.g = (hue == 1 || hue == 2 || hue == 3) ? hi : lo;
      fill.b = (hue == 3 || hue == 4 || hue == 5) ? hi : lo;
      for (std::int64_t y = 0; y < size; ++y) {
        for (std::int64_t x = 0; x < size; ++x) put(x, y, edge(x, y) ? Rgb{0.05, 0.05, 0.05} : at(x, y) ? fill : bg);
      }
      break;
    }
    default: {  // sketch: pen strokes on paper
      const double paper = rng.uniform(0.9, 1.0), ink = rng.uniform(0.0, 0.2);
      for (std::int64_t y = 0; y < size; ++y) {
        for (std::int64_t x = 0; x < size; ++x) {
          const double v = edge(x, y) ? ink : paper;
          put(x, y, {v, v, v});
        }
      }
      break;
    }
  }
  for (auto& v : px) v = std::clamp(v, 0.0, 1.0);
  return px;
}

}  // namespace

DomainDataset synth_generate(const SynthConfig& config, std::uint64_t seed) {
  config.validate();
  DomainDataset data;
  data.provenance = "synthetic";
  data.channels = 3;
  data.image_size = config.image_size;
  data.classes.assign(synth_class_names().begin(), synth_class_names().begin() + config.classes);
  data.domains.assign(synth_domain_names().begin(), synth_domain_names().begin() + config.domains);
  for (int d = 0; d < config.domains; ++d) {
    Rng rng(derive_seed(seed, "synth/" + data.domains[d]));
    // Round-robin class assignment keeps every domain balanced.
    std::vector<int> counts(config.classes, config.images_per_domain / config.classes);
    for (int r = 0; r < config.images_per_domain % config.classes; ++r) ++counts[r];
    for (int c = 0; c < config.classes; ++c) {
      for (int k = 0; k < counts[c]; ++k) data.samples.push_back({render(c, d, config.image_size, rng), c, d});
    }
  }
  data.compute_normalization();
  return data;
}

// ---------------------------------------------------------------------------
// Codecs

namespace {

std::string lower_ext(const fs::path& p) {
  std::string e = p.extension().string();
  std::transform(e.begin(), e.end(), e.begin(), [](unsigned char ch) { return static_cast<char>(std::tolower(ch)); });
  return e;
}

RawImage read_netpbm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open image " + path.string());
  auto token = [&]() {
    std::string t;
    char ch;
    while (in.get(ch)) {
      if (ch == '#') {
        std::string skip;
        std::getline(in, skip);
      } else if (!std::isspace(static_cast<unsigned char>(ch))) {
        t += ch;
        break;
      }
    }
    while (in.get(ch) && !std::isspace(static_cast<unsigned char>(ch))) t += ch;
    return t;
  };
  const std::string magic = token();
  if (magic != "P2" && magic != "P3" && magic != "P5" && magic != "P6") {
    throw std::runtime_error("undecodable image " + path.string() + ": unsupported netpbm magic '" + magic + "'");
  }
  RawImage img;
  long maxval = 0;
  try {
    img.width = std::stol(token());
    img.height = std::stol(token());
    maxval = std::stol(token());
  } catch (const std::exception&) {
    throw std::runtime_error("undecodable image " + path.string() + ": bad header");
  }
  if (img.width <= 0 || img.height <= 0 || maxval <= 0 || maxval > 65535) {
    throw std::runtime_error("undecodable image " + path.string() + ": bad header");
  }
  img.channels = (magic == "P3" || magic == "P6") ? 3 : 1;
  const std::size_t count = static_cast<std::size_t>(img.width * img.height * img.channels);
  img.pixels.resize(count);
  auto scale = [&](long v) { return static_cast<std::uint8_t>(std::lround(255.0 * static_cast<double>(v) / maxval)); };
  if (magic == "P2" || magic == "P3") {
    for (auto& p : img.pixels) {
      const auto t = token();
      if (t.empty()) throw std::runtime_error("undecodable image " + path.string() + ": truncated data");
      p = scale(std::stol(t));
    }
  } else {
    const int bytes = maxval > 255 ? 2 : 1;
    std::vector<unsigned char> raw(count * bytes);
    if (!in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()))) {
      throw std::runtime_error("undecodable image " + path.string() + ": truncated data");
    }
    for (std::size_t i = 0; i < count; ++i) {
      const long v = bytes == 2 ? (raw[2 * i] << 8) | raw[2 * i + 1] : raw[i];
      img.pixels[i] = scale(v);
    }
  }
  return img;
}

RawImage read_png(const fs::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    throw std::runtime_error("undecodable image " + path.string() + ": " + image.message);
  }
  image.format = PNG_FORMAT_RGB;
  RawImage img;
  img.width = image.width;
  img.height = image.height;
  img.channels = 3;
  img.pixels.resize(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, img.pixels.data(), 0, nullptr)) {
    const std::string msg = image.message;
    png_image_free(&image);
    throw std::runtime_error("undecodable image " + path.string() + ": " + msg);
  }
  return img;
}

void write_netpbm(const fs::path& path, const RawImage& image, const char* magic) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << magic << "\n" << image.width << " " << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

bool is_image(const fs::path& p) {
  const auto e = lower_ext(p);
  return e == ".ppm" || e == ".pgm" || e == ".png" || e == ".pnm";
}

std::vector<fs::path> sorted_children(const fs::path& dir, bool directories) {
  std::vector<fs::path> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (directories ? entry.is_directory() : (entry.is_regular_file() && is_image(entry.path()))) {
      out.push_back(entry.path());
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

RawImage read_image(const fs::path& path) {
  const auto e = lower_ext(path);
  if (e == ".png") return read_png(path);
  if (e == ".ppm" || e == ".pgm" || e == ".pnm") return read_netpbm(path);
  throw std::runtime_error("undecodable image " + path.string() + ": unknown extension");
}

void write_ppm(const fs::path& path, const RawImage& image) {
  if (image.channels != 3) throw std::invalid_argument("write_ppm: expected 3 channels");
  write_netpbm(path, image, "P6");
}

void write_pgm(const fs::path& path, const RawImage& image) {
  if (image.channels != 1) throw std::invalid_argument("write_pgm: expected 1 channel");
  write_netpbm(path, image, "P5");
}

RawImage resize_nearest(const RawImage& image, std::int64_t width, std::int64_t height) {
  RawImage out{width, height, image.channels, {}};
  out.pixels.resize(static_cast<std::size_t>(width * height * image.channels));
  for (std::int64_t y = 0; y < height; ++y) {
    const std::int64_t sy = y * image.height / height;
    for (std::int64_t x = 0; x < width; ++x) {
      const std::int64_t sx = x * image.width / width;
      for (std::int64_t c = 0; c < image.channels; ++c) {
        out.pixels[(y * width + x) * image.channels + c] = image.pixels[(sy * image.width + sx) * image.channels + c];
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Folder ingest / export

DomainDataset ingest_folder(const fs::path& root, std::int64_t image_size, std::int64_t channels) {
  if (!fs::is_directory(root)) throw std::invalid_argument("dataset root " + root.string() + " is not a directory");
  if (channels != 1 && channels != 3) throw std::invalid_argument("ingest: channels must be 1 or 3");
  if (image_size <= 0) throw std::invalid_argument("ingest: image_size must be positive");
  DomainDataset data;
  data.provenance = "folder";
  data.channels = channels;
  data.image_size = image_size;

  const auto domain_dirs = sorted_children(root, true);
  if (domain_dirs.empty()) throw std::invalid_argument("dataset root " + root.string() + " has no domain directories");
  std::map<std::string, std::set<std::string>> classes_of;
  std::set<std::string> all;
  for (const auto& d : domain_dirs) {
    for (const auto& c : sorted_children(d, true)) {
      classes_of[d.filename().string()].insert(c.filename().string());
      all.insert(c.filename().string());
    }
  }
  std::vector<std::string> asym;
  for (const auto& d : domain_dirs) {
    const auto& have = classes_of[d.filename().string()];
    for (const auto& c : all) {
      if (!have.count(c)) asym.push_back(d.filename().string() + " lacks class '" + c + "'");
    }
  }
  if (!asym.empty()) {
    std::string msg = "inconsistent class sets across domains:";
    for (const auto& a : asym) msg += " " + a + ";";
    throw std::invalid_argument(msg);
  }
  data.classes.assign(all.begin(), all.end());
  const std::int64_t plane = image_size * image_size;
  for (std::size_t di = 0; di < domain_dirs.size(); ++di) {
    data.domains.push_back(domain_dirs[di].filename().string());
    for (std::size_t ci = 0; ci < data.classes.size(); ++ci) {
      for (const auto& file : sorted_children(domain_dirs[di] / data.classes[ci], false)) {
        const auto img = resize_nearest(read_image(file), image_size, image_size);
        Sample s{std::vector<double>(static_cast<std::size_t>(channels * plane)), static_cast<int>(ci),
                 static_cast<int>(di)};
        for (std::int64_t i = 0; i < plane; ++i) {
          const auto* p = &img.pixels[i * img.channels];
          if (channels == 3) {
            for (int c = 0; c < 3; ++c) s.pixels[c * plane + i] = (img.channels == 3 ? p[c] : p[0]) / 255.0;
          } else {
            s.pixels[i] = (img.channels == 3 ? (p[0] + p[1] + p[2]) / 3.0 : p[0]) / 255.0;
          }
        }
        data.samples.push_back(std::move(s));
      }
    }
  }
  data.validate();
  data.compute_normalization();
  return data;
}

void export_folder(const DomainDataset& data, const fs::path& root) {
  data.validate();
  const std::int64_t s = data.image_size, plane = s * s;
  std::vector<int> counter(data.domains.size() * data.classes.size(), 0);
  for (const auto& d : data.domains) {
    for (const auto& c : data.classes) fs::create_directories(root / d / c);
  }
  for (const auto& smp : data.samples) {
    RawImage img{s, s, data.channels, std::vector<std::uint8_t>(static_cast<std::size_t>(plane * data.channels))};
    for (std::int64_t i = 0; i < plane; ++i) {
      for (std::int64_t c = 0; c < data.channels; ++c) {
        img.pixels[i * data.channels + c] =
            static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(smp.pixels[c * plane + i], 0.0, 1.0)));
      }
    }
    int& n = counter[smp.domain * data.classes.size() + smp.label];
    char name[32];
    std::snprintf(name, sizeof name, "%05d.%s", n++, data.channels == 3 ? "ppm" : "pgm");
    const auto path = root / data.domains[smp.domain] / data.classes[smp.label] / name;
    if (data.channels == 3) write_ppm(path, img); else write_pgm(path, img);
  }
}

// ---------------------------------------------------------------------------
// Splits

std::string to_string(SplitKind k) { return k == SplitKind::kPooledHoldout ? "pooled_holdout" : "leave_one_domain_out"; }

SplitKind split_kind_from_string(const std::string& s) {
  if (s == "pooled_holdout") return SplitKind::kPooledHoldout;
  if (s == "leave_one_domain_out" || s == "lodo") return SplitKind::kLeaveOneDomainOut;
  throw std::invalid_argument("unknown split protocol '" + s + "' (expected pooled_holdout|leave_one_domain_out)");
}

void SplitProtocol::validate() const {
  std::vector<std::string> errors;
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) errors.push_back("train_fraction must be in (0, 1)");
  if (!(valid_fraction > 0.0 && valid_fraction < 1.0)) errors.push_back("valid_fraction must be in (0, 1)");
  if (kind == SplitKind::kLeaveOneDomainOut && holdout.empty()) errors.push_back("LODO requires a holdout domain");
  if (!errors.empty()) {
    std::string msg = "invalid split protocol:";
    for (const auto& e : errors) msg += " " + e + ";";
    throw std::invalid_argument(msg);
  }
}

Splits make_splits(const DomainDataset& data, const SplitProtocol& p) {
  p.validate();
  int holdout = -1;
  if (p.kind == SplitKind::kLeaveOneDomainOut) {
    auto it = std::find(data.domains.begin(), data.domains.end(), p.holdout);
    if (it == data.domains.end()) throw std::invalid_argument("LODO holdout domain '" + p.holdout + "' not in dataset");
    holdout = static_cast<int>(it - data.domains.begin());
  }
  std::vector<std::vector<std::size_t>> by_domain(data.domains.size());
  for (std::size_t i = 0; i < data.samples.size(); ++i) by_domain[data.samples[i].domain].push_back(i);

  Splits out;
  for (std::size_t d = 0; d < by_domain.size(); ++d) {
    auto idx = by_domain[d];
    if (static_cast<int>(d) == holdout) {
      out.test.insert(out.test.end(), idx.begin(), idx.end());
      continue;
    }
    Rng rng(derive_seed(p.seed, "split/" + data.domains[d]));
    rng.shuffle(idx);
    std::size_t n_tv = idx.size();
    if (p.kind == SplitKind::kPooledHoldout) {
      n_tv = static_cast<std::size_t>(std::llround(p.train_fraction * static_cast<double>(idx.size())));
    }
    const auto n_valid = static_cast<std::size_t>(std::llround(p.valid_fraction * static_cast<double>(n_tv)));
    out.valid.insert(out.valid.end(), idx.begin(), idx.begin() + n_valid);
    out.train.insert(out.train.end(), idx.begin() + n_valid, idx.begin() + n_tv);
    out.test.insert(out.test.end(), idx.begin() + n_tv, idx.end());
  }
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.valid.begin(), out.valid.end());
  std::sort(out.test.begin(), out.test.end());
  return out;
}

}  // namespace vp
