#include "vitprune/attention.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace vp {

namespace {

std::vector<double> center_distances(std::int64_t grid, std::int64_t patch_size) {
  const std::int64_t n = grid * grid;
  std::vector<double> d(n * n);
  for (std::int64_t q = 0; q < n; ++q) {
    for (std::int64_t k = 0; k < n; ++k) {
      const double dr = static_cast<double>(q / grid - k / grid);
      const double dc = static_cast<double>(q % grid - k % grid);
      d[q * n + k] = static_cast<double>(patch_size) * std::sqrt(dr * dr + dc * dc);
    }
  }
  return d;
}

double distance_with(std::span<const double> m, std::span<const double> dist, std::int64_t n, std::int64_t offset) {
  const std::int64_t t = n + offset;
  double total = 0.0;
  for (std::int64_t q = 0; q < n; ++q) {
    const double* row = m.data() + (q + offset) * t + offset;
    double mass = 0.0, acc = 0.0;
    for (std::int64_t k = 0; k < n; ++k) {
      mass += row[k];
      acc += row[k] * dist[q * n + k];
    }
    // A row whose mass sits entirely on cls has no spatial extent.
    if (mass > 0.0) total += acc / mass;
  }
  return total / static_cast<double>(n);
}

void check_record(const AttentionRecord& r, const ModelConfig& c) {
  if (static_cast<std::int64_t>(r.layers.size()) != c.num_layers) {
    throw std::invalid_argument("attention record has " + std::to_string(r.layers.size()) + " layers, model has " +
                                std::to_string(c.num_layers));
  }
  const auto t = c.num_tokens();
  for (std::size_t l = 0; l < r.layers.size(); ++l) {
    const auto& a = r.layers[l];
    if (a.rank() != 4 || a.dim(1) != c.num_heads[l] || a.dim(2) != t || a.dim(3) != t) {
      throw std::invalid_argument("attention record layer " + std::to_string(l) + " has shape " +
                                  shape_str(a.shape()) + ", expected [batch, " + std::to_string(c.num_heads[l]) +
                                  ", " + std::to_string(t) + ", " + std::to_string(t) + "]");
    }
    if (a.dim(0) != r.layers[0].dim(0)) throw std::invalid_argument("attention record layers disagree on batch size");
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Distance

double AttentionDistanceTable::max_distance() const {
  return static_cast<double>(patch_size) * std::sqrt(2.0) * static_cast<double>(std::max<std::int64_t>(grid - 1, 0));
}

std::string AttentionDistanceTable::to_csv() const {
  std::ostringstream os;
  os.precision(17);
  os << "layer,head,mean_distance_px,n_images\n";
  for (std::size_t l = 0; l < distance.size(); ++l) {
    for (std::size_t h = 0; h < distance[l].size(); ++h) {
      os << l << ',' << h << ',' << distance[l][h] << ',' << n_images[l][h] << '\n';
    }
  }
  return os.str();
}

Json AttentionDistanceTable::to_json() const {
  return Json{{"grid", grid},
              {"patch_size", patch_size},
              {"max_distance_px", max_distance()},
              {"mean_distance_px", distance},
              {"n_images", n_images}};
}

double attention_distance(std::span<const double> matrix, std::int64_t grid, std::int64_t patch_size, bool has_cls) {
  const std::int64_t n = grid * grid, t = n + (has_cls ? 1 : 0);
  if (grid <= 0 || patch_size <= 0) throw std::invalid_argument("attention_distance: grid and patch size must be positive");
  if (static_cast<std::int64_t>(matrix.size()) != t * t) {
    throw std::invalid_argument("attention_distance: matrix has " + std::to_string(matrix.size()) +
                                " entries, grid implies " + std::to_string(t * t));
  }
  return distance_with(matrix, center_distances(grid, patch_size), n, has_cls ? 1 : 0);
}

AttentionDistanceAccumulator::AttentionDistanceAccumulator(const ModelConfig& config) : config_(config) {
  config_.validate();
  for (auto h : config_.num_heads) {
    sum_.emplace_back(h, 0.0);
    count_.emplace_back(h, 0);
  }
}

void AttentionDistanceAccumulator::add(const AttentionRecord& record) {
  check_record(record, config_);
  const auto grid = config_.grid(), n = grid * grid, t = config_.num_tokens();
  const auto offset = config_.use_cls_token ? 1 : 0;
  const auto dist = center_distances(grid, config_.patch_size);
  for (std::size_t l = 0; l < record.layers.size(); ++l) {
    const auto a = record.layers[l].data();
    const auto batch = record.layers[l].dim(0), heads = record.layers[l].dim(1);
    for (std::int64_t b = 0; b < batch; ++b) {
      for (std::int64_t h = 0; h < heads; ++h) {
        sum_[l][h] += distance_with(a.subspan((b * heads + h) * t * t, t * t), dist, n, offset);
        ++count_[l][h];
      }
    }
  }
}

AttentionDistanceTable AttentionDistanceAccumulator::table() const {
  AttentionDistanceTable out;
  out.grid = config_.grid();
  out.patch_size = config_.patch_size;
  out.n_images = count_;
  for (std::size_t l = 0; l < sum_.size(); ++l) {
    auto& row = out.distance.emplace_back(sum_[l].size(), 0.0);
    for (std::size_t h = 0; h < row.size(); ++h) {
      if (count_[l][h] > 0) row[h] = sum_[l][h] / static_cast<double>(count_[l][h]);
    }
  }
  return out;
}

AttentionDistanceTable mean_attention_distance(std::span<const AttentionRecord> records, const ModelConfig& config) {
  AttentionDistanceAccumulator acc(config);
  for (const auto& r : records) acc.add(r);
  return acc.table();
}

AttentionDistanceTable mean_attention_distance(const TransformerModel& model, const DomainDataset& data,
                                               std::span<const std::size_t> indices, std::int64_t batch_size) {
  if (indices.empty()) throw std::invalid_argument("mean_attention_distance: no images");
  if (batch_size <= 0) throw std::invalid_argument("mean_attention_distance: batch size must be positive");
  NoGradGuard guard;
  AttentionDistanceAccumulator acc(model.config());
  for (std::size_t start = 0; start < indices.size(); start += batch_size) {
    const auto part = indices.subspan(start, std::min<std::size_t>(batch_size, indices.size() - start));
    AttentionRecord rec;
    model.forward(data.images(part), &rec);
    acc.add(rec);
  }
  return acc.table();
}

// ---------------------------------------------------------------------------
// Maps

std::string to_string(MapMode m) { return m == MapMode::kClsQuery ? "cls_query" : "token_mask"; }

MapMode map_mode_from_string(const std::string& s) {
  if (s == "cls_query") return MapMode::kClsQuery;
  if (s == "token_mask") return MapMode::kTokenMask;
  throw std::invalid_argument("unknown attention map mode '" + s + "' (expected cls_query|token_mask)");
}

std::vector<double> cls_saliency(const Tensor& a, std::int64_t image, std::int64_t grid) {
  const std::int64_t n = grid * grid, t = n + 1;
  if (a.rank() != 4 || a.dim(2) != t || a.dim(3) != t) {
    throw std::invalid_argument("cls_saliency: attention shape " + shape_str(a.shape()) + " does not fit a " +
                                std::to_string(grid) + "x" + std::to_string(grid) + " grid plus cls");
  }
  if (image < 0 || image >= a.dim(0)) throw std::out_of_range("cls_saliency: image index out of range");
  const auto heads = a.dim(1);
  const auto d = a.data();
  std::vector<double> s(n, 0.0);
  for (std::int64_t h = 0; h < heads; ++h) {
    const double* row = d.data() + (image * heads + h) * t * t;  // query 0 is cls
    for (std::int64_t k = 0; k < n; ++k) s[k] += row[k + 1];
  }
  const double total = std::accumulate(s.begin(), s.end(), 0.0);
  if (total <= 0.0) throw std::invalid_argument("cls_saliency: cls attends only to itself");
  for (auto& v : s) v /= total;
  return s;
}

std::vector<std::uint8_t> token_mask(std::span<const double> saliency, double coverage) {
  if (!(coverage > 0.0 && coverage <= 1.0)) throw std::invalid_argument("token_mask: coverage must be in (0, 1]");
  const double total = std::accumulate(saliency.begin(), saliency.end(), 0.0);
  std::vector<std::size_t> order(saliency.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return saliency[a] > saliency[b]; });
  std::vector<std::uint8_t> mask(saliency.size(), 0);
  const double target = coverage * total;
  const double tol = 1e-12 * std::max(total, 1.0);
  double mass = 0.0;
  std::size_t i = 0;
  for (; i < order.size() && mass < target - tol; ++i) {
    mask[order[i]] = 1;
    mass += saliency[order[i]];
  }
  if (i > 0) {
    const double last = saliency[order[i - 1]];
    for (; i < order.size() && std::abs(saliency[order[i]] - last) <= tol; ++i) mask[order[i]] = 1;
  }
  return mask;
}

std::vector<double> upsample_nearest(std::span<const double> g, std::int64_t grid, std::int64_t size) {
  if (grid <= 0 || static_cast<std::int64_t>(g.size()) != grid * grid) {
    throw std::invalid_argument("upsample_nearest: values do not form a grid");
  }
  std::vector<double> out(size * size);
  for (std::int64_t y = 0; y < size; ++y) {
    const auto gy = y * grid / size;
    for (std::int64_t x = 0; x < size; ++x) out[y * size + x] = g[gy * grid + x * grid / size];
  }
  return out;
}

RawImage blend_overlay(std::span<const double> raw, std::int64_t channels, std::int64_t size,
                       std::span<const double> overlay, double alpha) {
  const std::int64_t plane = size * size;
  if (static_cast<std::int64_t>(raw.size()) != channels * plane || static_cast<std::int64_t>(overlay.size()) != plane) {
    throw std::invalid_argument("blend_overlay: image and overlay sizes disagree");
  }
  if (channels != 1 && channels != 3) throw std::invalid_argument("blend_overlay: channels must be 1 or 3");
  RawImage img{size, size, 1, std::vector<std::uint8_t>(plane)};
  for (std::int64_t i = 0; i < plane; ++i) {
    const double luma =
        channels == 3 ? 0.299 * raw[i] + 0.587 * raw[plane + i] + 0.114 * raw[2 * plane + i] : raw[i];
    const double v = std::clamp((1.0 - alpha) * luma + alpha * overlay[i], 0.0, 1.0);
    img.pixels[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
  }
  return img;
}

AttentionMap attention_map(const TransformerModel& model, const DomainDataset& data, std::size_t index,
                           std::int64_t layer, MapMode mode) {
  const auto& c = model.config();
  if (!c.use_cls_token) throw std::invalid_argument("attention_map: model has no cls token to query");
  if (layer < 0 || layer >= c.num_layers) {
    throw std::out_of_range("attention_map: layer " + std::to_string(layer) + " outside [0, " +
                            std::to_string(c.num_layers) + ")");
  }
  if (index >= data.size()) throw std::out_of_range("attention_map: sample index out of range");
  if (data.image_size != c.image_size || data.channels != c.channels) {
    throw std::invalid_argument("attention_map: dataset images do not match the model input");
  }
  AttentionRecord rec;
  {
    NoGradGuard guard;
    const std::size_t one[] = {index};
    model.forward(data.images(one), &rec);
  }
  AttentionMap m;
  m.mode = mode;
  m.layer = layer;
  m.grid = c.grid();
  m.saliency = cls_saliency(rec.layers[layer], 0, m.grid);
  std::vector<double> overlay;
  if (mode == MapMode::kTokenMask) {
    m.mask = token_mask(m.saliency);
    overlay.assign(m.mask.begin(), m.mask.end());
  } else {
    const double peak = *std::max_element(m.saliency.begin(), m.saliency.end());
    for (double v : m.saliency) overlay.push_back(peak > 0.0 ? v / peak : 0.0);
  }
  m.heatmap = blend_overlay(data.samples[index].pixels, c.channels, c.image_size,
                            upsample_nearest(overlay, m.grid, c.image_size));
  return m;
}

}  // namespace vp
