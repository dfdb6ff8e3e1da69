#include "fedvirt/data.h"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "fedvirt/container.h"
#include "fedvirt/errors.h"
#include "fedvirt/rng.h"

namespace fedvirt {
namespace {

constexpr std::uint32_t kIdxImages = 0x00000803;
constexpr std::uint32_t kIdxLabels = 0x00000801;
constexpr std::uint32_t kMaxSide = 4096;
constexpr std::uint32_t kMaxCount = 1u << 26;

std::uint32_t be32(std::string_view s, std::size_t at) {
  std::uint32_t v = 0;
  for (std::size_t i = 0; i < 4; ++i) v = (v << 8) | static_cast<unsigned char>(s[at + i]);
  return v;
}

void put_be32(std::string& out, std::uint32_t v) {
  for (int i = 3; i >= 0; --i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

// Validates magic and dims; returns the dims and the header size.
std::vector<std::uint32_t> idx_header(std::string_view bytes, std::uint32_t magic,
                                      const char* what) {
  const std::string file = what;
  if (bytes.size() < 4) throw ParseError(file + ": short header", bytes.size());
  const std::uint32_t got = be32(bytes, 0);
  if (got != magic) {
    // Right element type, wrong number of dimensions.
    if ((got & 0xffffff00u) == (magic & 0xffffff00u)) {
      throw ParseError(file + ": expected " + std::to_string(magic & 0xff) + " dimensions, got " +
                           std::to_string(got & 0xff), 3);
    }
    char buf[16];
    std::snprintf(buf, sizeof buf, "0x%08x", got);
    throw ParseError(file + ": bad magic " + buf, 0);
  }
  const std::size_t ndims = magic & 0xff;
  const std::size_t header = 4 + 4 * ndims;
  if (bytes.size() < header) throw ParseError(file + ": short header", bytes.size());
  std::vector<std::uint32_t> dims(ndims);
  for (std::size_t i = 0; i < ndims; ++i) {
    dims[i] = be32(bytes, 4 + 4 * i);
    const std::uint32_t limit = i == 0 ? kMaxCount : kMaxSide;
    if (dims[i] == 0) {
      throw ParseError(file + (i == 0 ? ": zero item count" : ": zero-sized dimension"), 4 + 4 * i);
    }
    if (dims[i] > limit) {
      throw ParseError(file + ": dimension " + std::to_string(i) + " is " +
                           std::to_string(dims[i]) + ", above the limit " + std::to_string(limit),
                       4 + 4 * i);
    }
  }
  std::uint64_t payload = 1;
  for (std::uint32_t d : dims) payload *= d;
  if (bytes.size() - header < payload) {
    throw ParseError(file + ": payload truncated, need " + std::to_string(payload) +
                         " bytes, have " + std::to_string(bytes.size() - header),
                     bytes.size());
  }
  if (bytes.size() - header > payload) {
    throw ParseError(file + ": " + std::to_string(bytes.size() - header - payload) +
                         " trailing bytes",
                     header + payload);
  }
  return dims;
}

double clampd(double v, PixelRange r) { return std::min(std::max(v, r.lo), r.hi); }

double box_sd(double x, double y, double hx, double hy) {
  const double dx = std::abs(x) - hx;
  const double dy = std::abs(y) - hy;
  const double ox = std::max(dx, 0.0);
  const double oy = std::max(dy, 0.0);
  return std::sqrt(ox * ox + oy * oy) + std::min(std::max(dx, dy), 0.0);
}

double shape_sd(std::int64_t cls, double x, double y, double size) {
  switch (cls) {
    case 0:
      return std::hypot(x, y) - 4.5 * size;
    case 1:
      return std::abs(std::hypot(x, y) - 4.5 * size) - 0.9 * size;
    case 2:
      return std::min(box_sd(x, y, 5.5 * size, 1.2 * size), box_sd(x, y, 1.2 * size, 5.5 * size));
    default:
      return std::abs(box_sd(x, y, 4.5 * size, 4.5 * size)) - 0.9 * size;
  }
}

}  // namespace

void validate_dataset(const LabeledDataset& d) {
  if (!d.images.defined() || d.images.rank() != 4 || d.images.dim(2) != d.images.dim(3)) {
    throw ContractError("dataset: images must be [N,C,S,S], got " +
                        (d.images.defined() ? shape_string(d.images.shape()) : "undefined"));
  }
  if (d.size() < 1 || d.images.dim(0) != d.size()) {
    throw ContractError("dataset: " + std::to_string(d.images.dim(0)) + " images vs " +
                        std::to_string(d.size()) + " labels");
  }
  for (std::int64_t y : d.labels) {
    if (y < 0 || y >= d.class_count) {
      throw ContractError("dataset: label " + std::to_string(y) + " outside [0, " +
                          std::to_string(d.class_count) + ")");
    }
  }
  if (!(d.range.lo < d.range.hi)) throw ContractError("dataset: empty pixel range");
  for (double v : d.images.data()) {
    if (!(v >= d.range.lo && v <= d.range.hi)) {
      throw ContractError("dataset: pixel value " + std::to_string(v) +
                          " outside the declared range");
    }
  }
}

LabeledDataset subset(const LabeledDataset& d, std::span<const std::int64_t> idx) {
  LabeledDataset out = d;
  {
    NoGradScope ng;
    out.images = take_rows(d.images.detach(), idx);
  }
  out.labels.clear();
  for (std::int64_t i : idx) out.labels.push_back(d.labels.at(static_cast<std::size_t>(i)));
  return out;
}

std::vector<std::vector<std::int64_t>> class_indices(const Labels& labels,
                                                     std::int64_t class_count) {
  std::vector<std::vector<std::int64_t>> out(static_cast<std::size_t>(class_count));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= class_count) {
      throw ContractError("class_indices: label " + std::to_string(labels[i]) + " out of range");
    }
    out[static_cast<std::size_t>(labels[i])].push_back(static_cast<std::int64_t>(i));
  }
  return out;
}

LabeledDataset parse_idx(std::string_view image_bytes, std::string_view label_bytes,
                         bool normalize, std::int64_t declared_classes) {
  if (declared_classes < 1 || declared_classes > 256) {
    throw ContractError("parse_idx: declared class count must be in [1, 256]");
  }
  const auto idims = idx_header(image_bytes, kIdxImages, "images");
  const auto ldims = idx_header(label_bytes, kIdxLabels, "labels");
  if (idims[0] != ldims[0]) {
    throw ParseError("labels: count " + std::to_string(ldims[0]) + " does not match image count " +
                         std::to_string(idims[0]),
                     4);
  }
  const std::int64_t n = idims[0], rows = idims[1], cols = idims[2];
  if (rows != cols) {
    throw ParseError("images: non-square " + std::to_string(rows) + "x" + std::to_string(cols) +
                         " images are not supported",
                     8);
  }
  LabeledDataset d;
  d.class_count = declared_classes;
  for (std::int64_t i = 0; i < n; ++i) {
    const auto y = static_cast<unsigned char>(label_bytes[8 + i]);
    if (y >= declared_classes) {
      throw ParseError("labels: label " + std::to_string(y) + " is not below the declared " +
                           std::to_string(declared_classes) + " classes",
                       8 + static_cast<std::uint64_t>(i));
    }
    d.labels.push_back(y);
  }
  const double s = normalize ? 1.0 / 255.0 : 1.0;
  std::vector<double> px(static_cast<std::size_t>(n * rows * cols));
  for (std::size_t i = 0; i < px.size(); ++i) {
    const auto b = static_cast<unsigned char>(image_bytes[16 + i]);
    px[i] = b == 255 && normalize ? 1.0 : b * s;
  }
  d.images = Tensor({n, 1, rows, cols}, std::move(px));
  d.range = normalize ? PixelRange{0.0, 1.0} : PixelRange{0.0, 255.0};
  d.provenance = "idx";
  return d;
}

LabeledDataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                        bool normalize, std::int64_t declared_classes) {
  LabeledDataset d;
  try {
    d = parse_idx(read_file(images), read_file(labels), normalize, declared_classes);
  } catch (const ParseError& e) {
    throw ParseError(images.filename().string() + "/" + labels.filename().string() + ": " +
                         e.what(),
                     e.offset());
  }
  d.provenance = "idx:" + images.string();
  return d;
}

std::string encode_idx_images(std::int64_t n, std::int64_t rows, std::int64_t cols,
                              std::span<const std::uint8_t> pixels) {
  if (static_cast<std::int64_t>(pixels.size()) != n * rows * cols) {
    throw ContractError("encode_idx_images: pixel count does not match dims");
  }
  std::string out;
  put_be32(out, kIdxImages);
  put_be32(out, static_cast<std::uint32_t>(n));
  put_be32(out, static_cast<std::uint32_t>(rows));
  put_be32(out, static_cast<std::uint32_t>(cols));
  out.append(reinterpret_cast<const char*>(pixels.data()), pixels.size());
  return out;
}

std::string encode_idx_labels(std::span<const std::uint8_t> labels) {
  std::string out;
  put_be32(out, kIdxLabels);
  put_be32(out, static_cast<std::uint32_t>(labels.size()));
  out.append(reinterpret_cast<const char*>(labels.data()), labels.size());
  return out;
}

LabeledDataset lift_to_rgb(const LabeledDataset& d) {
  if (d.channels() != 1) throw ContractError("lift_to_rgb: expected 1 channel");
  const std::int64_t n = d.size(), hw = d.side() * d.side();
  auto src = d.images.data();
  std::vector<double> out(static_cast<std::size_t>(n * 3 * hw));
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t c = 0; c < 3; ++c) {
      std::copy_n(src.begin() + i * hw, hw, out.begin() + (i * 3 + c) * hw);
    }
  }
  LabeledDataset r = d;
  r.images = Tensor({n, 3, d.side(), d.side()}, std::move(out));
  return r;
}

bool ShiftSpec::empty() const {
  return tint_scale.empty() && tint_offset.empty() && contrast == 1.0 && !invert &&
         rotate_degrees == 0.0 && noise_sigma == 0.0;
}

LabeledDataset synth_domain_shift(const LabeledDataset& base, const ShiftSpec& spec,
                                  std::uint64_t seed) {
  const std::int64_t n = base.size(), ch = base.channels(), side = base.side();
  auto bad = [](const std::string& what) { throw ContractError("synth_domain_shift: " + what); };
  for (const auto* v : {&spec.tint_scale, &spec.tint_offset}) {
    if (!v->empty() && static_cast<std::int64_t>(v->size()) != ch) {
      bad("tint needs one value per channel (" + std::to_string(ch) + ")");
    }
  }
  for (double s : spec.tint_scale) {
    if (!(s >= 0.0 && s <= 2.0)) bad("tint scale " + std::to_string(s) + " outside [0, 2]");
  }
  for (double o : spec.tint_offset) {
    if (!(o >= -1.0 && o <= 1.0)) bad("tint offset " + std::to_string(o) + " outside [-1, 1]");
  }
  if (!(spec.contrast > 0.0 && spec.contrast <= 4.0)) bad("contrast outside (0, 4]");
  if (!(std::abs(spec.rotate_degrees) <= 15.0)) bad("rotation outside [-15, 15] degrees");
  if (!(spec.noise_sigma >= 0.0 && spec.noise_sigma <= 0.5)) bad("noise sigma outside [0, 0.5]");

  LabeledDataset out = base;
  if (spec.empty()) {
    out.images = base.images.clone();
    return out;
  }
  const PixelRange r = base.range;
  const double width = r.hi - r.lo;
  const std::int64_t hw = side * side, per = ch * hw;
  std::vector<double> px(base.images.data().begin(), base.images.data().end());
  const double theta = spec.rotate_degrees * std::numbers::pi / 180.0;
  const double cs = std::cos(theta), sn = std::sin(theta);
  const double mid = (static_cast<double>(side) - 1.0) / 2.0;
  std::vector<double> plane(static_cast<std::size_t>(hw));

  for (std::int64_t i = 0; i < n; ++i) {
    double* img = px.data() + i * per;
    if (!spec.tint_scale.empty() || !spec.tint_offset.empty()) {
      for (std::int64_t c = 0; c < ch; ++c) {
        const double s = spec.tint_scale.empty() ? 1.0 : spec.tint_scale[c];
        const double o = spec.tint_offset.empty() ? 0.0 : spec.tint_offset[c] * width;
        for (std::int64_t j = 0; j < hw; ++j) img[c * hw + j] = img[c * hw + j] * s + o;
      }
    }
    if (spec.contrast != 1.0) {
      double m = 0.0;
      for (std::int64_t j = 0; j < per; ++j) m += img[j];
      m /= static_cast<double>(per);
      for (std::int64_t j = 0; j < per; ++j) img[j] = m + spec.contrast * (img[j] - m);
    }
    if (spec.invert) {
      for (std::int64_t j = 0; j < per; ++j) img[j] = r.lo + r.hi - clampd(img[j], r);
    }
    if (spec.rotate_degrees != 0.0) {
      for (std::int64_t c = 0; c < ch; ++c) {
        double* p = img + c * hw;
        for (std::int64_t y = 0; y < side; ++y) {
          for (std::int64_t x = 0; x < side; ++x) {
            // Inverse map: sample the source at the output pixel rotated back.
            const double dx = static_cast<double>(x) - mid, dy = static_cast<double>(y) - mid;
            const double sx = cs * dx + sn * dy + mid, sy = -sn * dx + cs * dy + mid;
            const double fx = std::floor(sx), fy = std::floor(sy);
            const double ax = sx - fx, ay = sy - fy;
            const auto x0 = static_cast<std::int64_t>(fx), y0 = static_cast<std::int64_t>(fy);
            auto at = [&](std::int64_t yy, std::int64_t xx) {
              return yy >= 0 && yy < side && xx >= 0 && xx < side ? p[yy * side + xx] : 0.0;
            };
            plane[y * side + x] = (1 - ay) * ((1 - ax) * at(y0, x0) + ax * at(y0, x0 + 1)) +
                                  ay * ((1 - ax) * at(y0 + 1, x0) + ax * at(y0 + 1, x0 + 1));
          }
        }
        std::copy(plane.begin(), plane.end(), p);
      }
    }
    if (spec.noise_sigma > 0.0) {
      Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(i)}));
      const double s = spec.noise_sigma * width;
      for (std::int64_t j = 0; j < per; ++j) img[j] += s * rng.normal();
    }
    for (std::int64_t j = 0; j < per; ++j) img[j] = clampd(img[j], r);
  }
  out.images = Tensor(base.images.shape(), std::move(px));
  return out;
}

LabeledDataset blob_digits(std::int64_t n, std::uint64_t seed, const BlobDigitsOptions& o) {
  if (n < 1 || o.side < 4) throw ContractError("blob_digits: need n >= 1 and side >= 4");
  const std::int64_t side = o.side, hw = side * side;
  const double mid = (static_cast<double>(side) - 1.0) / 2.0;
  const double unit = static_cast<double>(side) / 16.0;
  std::vector<double> px(static_cast<std::size_t>(n * 3 * hw));
  LabeledDataset d;
  d.class_count = kBlobDigitClasses;
  d.range = {0.0, 1.0};
  d.provenance = "blob_digits";
  Rng rng(seed);
  for (std::int64_t i = 0; i < n; ++i) {
    const std::int64_t cls = i % kBlobDigitClasses;
    d.labels.push_back(cls);
    const double cx = mid + rng.uniform(-o.jitter, o.jitter) * unit;
    const double cy = mid + rng.uniform(-o.jitter, o.jitter) * unit;
    const double size = rng.uniform(0.8, 1.15) * unit;
    const double angle = rng.uniform(-0.35, 0.35);
    const double ca = std::cos(angle), sa = std::sin(angle);
    double fg[3], bg[3];
    for (int c = 0; c < 3; ++c) {
      fg[c] = rng.uniform(0.55, 1.0);
      bg[c] = rng.uniform(0.0, 0.35);
    }
    const bool dot = rng.uniform() < o.distractor_prob;
    const double dx0 = rng.uniform(1.0, static_cast<double>(side) - 2.0);
    const double dy0 = rng.uniform(1.0, static_cast<double>(side) - 2.0);
    for (std::int64_t y = 0; y < side; ++y) {
      for (std::int64_t x = 0; x < side; ++x) {
        const double px0 = static_cast<double>(x) - cx, py0 = static_cast<double>(y) - cy;
        const double u = ca * px0 + sa * py0, v = -sa * px0 + ca * py0;
        double m = std::clamp(0.5 - shape_sd(cls, u, v, size), 0.0, 1.0);
        if (dot) {
          const double dd = std::hypot(static_cast<double>(x) - dx0, static_cast<double>(y) - dy0);
          m = std::max(m, std::clamp(0.5 - (dd - 1.2 * unit), 0.0, 1.0));
        }
        for (int c = 0; c < 3; ++c) {
          const double val = bg[c] + (fg[c] - bg[c]) * m + o.noise * rng.normal();
          px[static_cast<std::size_t>((i * 3 + c) * hw + y * side + x)] = std::clamp(val, 0.0, 1.0);
        }
      }
    }
  }
  d.images = Tensor({n, 3, side, side}, std::move(px));
  return d;
}

Batches balanced_batches(const Labels& labels, std::int64_t batch_size, std::uint64_t seed) {
  if (labels.empty()) throw ContractError("balanced_batches: no samples");
  const std::int64_t k = *std::max_element(labels.begin(), labels.end()) + 1;
  auto by_class = class_indices(labels, k);
  std::vector<std::int64_t> present;
  std::size_t largest = 0;
  for (std::int64_t c = 0; c < k; ++c) {
    if (!by_class[c].empty()) {
      present.push_back(c);
      largest = std::max(largest, by_class[c].size());
    }
  }
  const auto classes = static_cast<std::int64_t>(present.size());
  if (batch_size < 2 * classes) {
    throw ContractError("balanced_batches: batch size " + std::to_string(batch_size) +
                        " cannot hold 2 samples of each of " + std::to_string(classes) +
                        " classes; class " + std::to_string(present.back()) +
                        " would have no positive pair");
  }
  const std::int64_t q = std::clamp<std::int64_t>(batch_size / classes, 2,
                                                  std::max<std::int64_t>(2, static_cast<std::int64_t>(largest)));
  Rng rng(seed);
  for (std::int64_t c : present) rng.shuffle(std::span<std::int64_t>(by_class[c]));
  const auto per_class = static_cast<std::int64_t>(largest);
  const std::int64_t n_batches = (per_class + q - 1) / q;
  Batches out(static_cast<std::size_t>(n_batches));
  for (std::int64_t b = 0; b < n_batches; ++b) {
    for (std::int64_t c : present) {
      const auto& order = by_class[c];
      const auto m = static_cast<std::int64_t>(order.size());
      for (std::int64_t j = 0; j < q; ++j) out[b].push_back(order[(b * q + j) % m]);
    }
  }
  return out;
}

Container dataset_to_container(const LabeledDataset& d) {
  Container c;
  c.kind = "dataset";
  c.meta = {{"labels", d.labels},
            {"class_count", d.class_count},
            {"range", {d.range.lo, d.range.hi}},
            {"provenance", d.provenance}};
  c.tensors.push_back({"images", d.images.detach()});
  return c;
}

LabeledDataset dataset_from_container(const Container& c) {
  if (c.kind != "dataset") throw ContractError("container kind '" + c.kind + "' is not 'dataset'");
  LabeledDataset d;
  try {
    d.labels = c.meta.at("labels").get<Labels>();
    d.class_count = c.meta.at("class_count").get<std::int64_t>();
    const auto r = c.meta.at("range").get<std::vector<double>>();
    if (r.size() != 2) throw ContractError("dataset container: range needs 2 values");
    d.range = {r[0], r[1]};
    d.provenance = c.meta.at("provenance").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw ContractError(std::string("dataset container: bad metadata: ") + e.what());
  }
  d.images = c.tensor("images");
  validate_dataset(d);
  return d;
}

}  // namespace fedvirt
