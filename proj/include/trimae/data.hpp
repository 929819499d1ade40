#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "trimae/common.hpp"
#include "trimae/core.hpp"

namespace trimae {

// ---- raster I/O (binary PGM, 8/16-bit) ----

inline void write_pgm16(const std::string& path, const ImagePlane& img) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("data", "cannot write " + path);
    f << "P5\n" << img.width << " " << img.height << "\n65535\n";
    for (double v : img.values) {
        const double c = std::clamp(v, 0.0, 1.0);
        const std::uint16_t q = static_cast<std::uint16_t>(std::lround(c * 65535.0));
        const char b[2] = {static_cast<char>(q >> 8), static_cast<char>(q & 0xff)};
        f.write(b, 2);  // PGM samples are big-endian
    }
}

inline void write_pgm8(const std::string& path, const LayerMap& map) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("data", "cannot write " + path);
    f << "P5\n" << map.width << " " << map.height << "\n255\n";
    for (int v : map.values) f.put(static_cast<char>(v & 0xff));
}

namespace detail {

inline void skip_pgm_whitespace(std::istream& f) {
    for (;;) {
        int c = f.peek();
        if (c == '#') {
            std::string line;
            std::getline(f, line);
        } else if (std::isspace(c)) {
            f.get();
        } else {
            break;
        }
    }
}

inline std::size_t read_pgm_int(std::istream& f) {
    skip_pgm_whitespace(f);
    std::size_t v = 0;
    if (!std::isdigit(f.peek())) throw DataError("data", "corrupt PGM header");
    while (std::isdigit(f.peek())) v = v * 10 + static_cast<std::size_t>(f.get() - '0');
    return v;
}

}  // namespace detail

struct RawPgm {
    std::size_t height = 0, width = 0, maxval = 0;
    std::vector<std::uint16_t> samples;
};

inline RawPgm read_pgm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("data", "missing file: " + path);
    char m0 = static_cast<char>(f.get()), m1 = static_cast<char>(f.get());
    if (m0 != 'P' || m1 != '5') throw DataError("data", "corrupt image (not binary PGM): " + path);
    RawPgm img;
    img.width = detail::read_pgm_int(f);
    img.height = detail::read_pgm_int(f);
    img.maxval = detail::read_pgm_int(f);
    f.get();  // single whitespace before payload
    img.samples.resize(img.width * img.height);
    if (img.maxval > 255) {
        for (auto& s : img.samples) {
            const int hi = f.get(), lo = f.get();
            if (lo == EOF) throw DataError("data", "corrupt image (truncated): " + path);
            s = static_cast<std::uint16_t>((hi << 8) | lo);
        }
    } else {
        for (auto& s : img.samples) {
            const int v = f.get();
            if (v == EOF) throw DataError("data", "corrupt image (truncated): " + path);
            s = static_cast<std::uint16_t>(v);
        }
    }
    return img;
}

// Min-max normalization onto [0,1]; constant planes map to all-zeros.
inline void normalize_minmax(ImagePlane& img) {
    if (img.values.empty()) return;
    double lo = img.values[0], hi = img.values[0];
    for (double v : img.values) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    if (hi <= lo) {
        std::fill(img.values.begin(), img.values.end(), 0.0);
        return;
    }
    for (double& v : img.values) v = (v - lo) / (hi - lo);
}

// ---- manifest ----

struct ManifestRow {
    std::string sample_id, patient_id, split;
    std::optional<int> label;
    std::string oct_path, slo_path, layers_path, mask_path;
    double spacing_x = 1.0, spacing_y = 1.0, slice_mm = 1.0;
};

inline const char* kManifestHeader =
    "sample_id,patient_id,split,label,oct_path,slo_path,layers_path,mask_path,"
    "spacing_x,spacing_y,slice_mm";

inline void write_manifest(const std::string& path, const std::vector<ManifestRow>& rows) {
    std::ofstream f(path);
    if (!f) throw DataError("data", "cannot write " + path);
    f << kManifestHeader << "\n";
    for (const auto& r : rows) {
        f << r.sample_id << "," << r.patient_id << "," << r.split << ","
          << (r.label ? std::to_string(*r.label) : "") << "," << r.oct_path << "," << r.slo_path
          << "," << r.layers_path << "," << r.mask_path << "," << r.spacing_x << ","
          << r.spacing_y << "," << r.slice_mm << "\n";
    }
}

inline std::vector<ManifestRow> read_manifest(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("data", "manifest not found: " + path);
    std::string line;
    if (!std::getline(f, line) || line != kManifestHeader)
        throw DataError("data", "manifest header malformed in " + path);
    std::vector<ManifestRow> rows;
    std::set<std::string> ids;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cols;
        std::stringstream ss(line);
        std::string c;
        while (std::getline(ss, c, ',')) cols.push_back(c);
        while (cols.size() < 11) cols.push_back("");
        ManifestRow r;
        r.sample_id = cols[0];
        r.patient_id = cols[1];
        r.split = cols[2];
        if (!cols[3].empty()) r.label = std::stoi(cols[3]);
        r.oct_path = cols[4];
        r.slo_path = cols[5];
        r.layers_path = cols[6];
        r.mask_path = cols[7];
        r.spacing_x = cols[8].empty() ? 1.0 : std::stod(cols[8]);
        r.spacing_y = cols[9].empty() ? 1.0 : std::stod(cols[9]);
        r.slice_mm = cols[10].empty() ? 1.0 : std::stod(cols[10]);
        if (!ids.insert(r.sample_id).second)
            throw DataError("data", "duplicate sample_id in manifest: " + r.sample_id);
        rows.push_back(std::move(r));
    }
    // a patient must not span splits
    std::map<std::string, std::string> patient_split;
    for (const auto& r : rows) {
        auto [it, inserted] = patient_split.emplace(r.patient_id, r.split);
        if (!inserted && it->second != r.split)
            throw DataError("data", "patient " + r.patient_id + " spans multiple splits");
    }
    return rows;
}

// ---- synthetic phantom ----

struct PhantomConfig {
    std::size_t size = 128;
    std::size_t num_layer_classes = 5;  // background + bands (+ lesion when enabled)
    std::size_t control_points = 5;
    double speckle = 0.05;
    double lesion_prob = 0.5;
    double lesion_r_min = 6.0, lesion_r_max = 14.0;
    std::uint64_t seed = 1;
};

namespace detail {

// smooth periodic-free interpolation through evenly spaced control points
inline std::vector<double> smooth_curve(std::size_t n, const std::vector<double>& ctrl) {
    std::vector<double> out(n);
    const std::size_t k = ctrl.size();
    for (std::size_t x = 0; x < n; ++x) {
        const double t = static_cast<double>(x) / static_cast<double>(n - 1) *
                         static_cast<double>(k - 1);
        const std::size_t i = std::min(static_cast<std::size_t>(t), k - 2);
        const double f = t - static_cast<double>(i);
        const double w = 0.5 - 0.5 * std::cos(f * M_PI);  // cosine easing
        out[x] = ctrl[i] * (1.0 - w) + ctrl[i + 1] * w;
    }
    return out;
}

}  // namespace detail

struct PhantomDataset {
    std::vector<Sample> samples;
    std::vector<ManifestRow> manifest;  // paths filled on write
    std::size_t regenerated = 0;        // infeasible-geometry retries
};

// Layered B-scan phantoms with coupled SLO and layer maps. Class 0 is
// background, classes 1..B are bands (top to bottom), and when lesions are
// enabled the last class marks lesion pixels.
inline PhantomDataset synth_generate(const PhantomConfig& cfg, std::size_t n_patients,
                                     std::size_t samples_per_patient) {
    if (cfg.num_layer_classes < 3)
        throw ConfigError("data", "phantom needs at least 3 classes");
    PhantomDataset out;
    const std::size_t S = cfg.size;
    const bool lesions = cfg.lesion_prob > 0.0;
    const std::size_t bands = cfg.num_layer_classes - 1 - (lesions ? 1 : 0);
    const int lesion_class = static_cast<int>(cfg.num_layer_classes) - 1;
    Rng rng(cfg.seed);

    for (std::size_t pi = 0; pi < n_patients; ++pi) {
        // patient-level anatomy: base boundary depths
        std::vector<double> base_depth(bands + 1);
        for (std::size_t b = 0; b <= bands; ++b)
            base_depth[b] = (0.22 + 0.5 * static_cast<double>(b) / static_cast<double>(bands)) *
                            static_cast<double>(S);
        for (std::size_t si = 0; si < samples_per_patient; ++si) {
            std::vector<std::vector<double>> curves(bands + 1);
            for (int attempt = 0;; ++attempt) {
                double jitter_scale = attempt == 0 ? 1.0 : 1.0 / (1.0 + attempt);
                for (std::size_t b = 0; b <= bands; ++b) {
                    std::vector<double> ctrl(cfg.control_points);
                    for (auto& c : ctrl)
                        c = base_depth[b] +
                            jitter_scale * rng.uniform(-0.05, 0.05) * static_cast<double>(S);
                    curves[b] = detail::smooth_curve(S, ctrl);
                }
                bool ok = true;
                for (std::size_t b = 0; b < bands && ok; ++b)
                    for (std::size_t x = 0; x < S; ++x)
                        if (curves[b + 1][x] - curves[b][x] < 1.5) {
                            ok = false;
                            break;
                        }
                if (ok) break;
                ++out.regenerated;
            }

            Sample s;
            s.sample_id = "p" + std::to_string(pi) + "s" + std::to_string(si);
            s.patient_id = "p" + std::to_string(pi);
            s.spacing = {0.01, 0.01, 0.05};
            s.oct = ImagePlane(S, S);
            s.slo = ImagePlane(S, S);
            s.layers = LayerMap(S, S);

            for (std::size_t y = 0; y < S; ++y)
                for (std::size_t x = 0; x < S; ++x) {
                    int cls = 0;
                    for (std::size_t b = 0; b < bands; ++b)
                        if (static_cast<double>(y) >= curves[b][x] &&
                            static_cast<double>(y) < curves[b + 1][x])
                            cls = static_cast<int>(b) + 1;
                    s.layers->at(y, x) = cls;
                    double base = 0.08;
                    if (cls > 0)
                        base = 0.30 + 0.50 * static_cast<double>(cls - 1) /
                                          static_cast<double>(std::max<std::size_t>(bands - 1, 1));
                    const double n = rng.uniform(-1.0, 1.0);
                    s.oct.at(y, x) = std::clamp(base * (1.0 + cfg.speckle * n), 0.0, 1.0);
                }

            // SLO: smooth en-face background sharing the sample's lesion latents
            for (std::size_t y = 0; y < S; ++y)
                for (std::size_t x = 0; x < S; ++x) {
                    const double dy = (static_cast<double>(y) - 0.5 * S) / S;
                    const double dx = (static_cast<double>(x) - 0.5 * S) / S;
                    double v = 0.55 - 0.35 * std::sqrt(dx * dx + dy * dy);
                    v += 0.02 * rng.uniform(-1.0, 1.0);
                    s.slo->at(y, x) = std::clamp(v, 0.0, 1.0);
                }

            const bool has_lesion = lesions && rng.uniform() < cfg.lesion_prob;
            if (has_lesion) {
                const std::size_t n_blobs = 1 + rng.uniform_int(2);
                for (std::size_t bl = 0; bl < n_blobs; ++bl) {
                    const double r = rng.uniform(cfg.lesion_r_min, cfg.lesion_r_max);
                    const double cx = rng.uniform(r, static_cast<double>(S) - r);
                    const std::size_t xi = static_cast<std::size_t>(cx);
                    const double band_top = curves[0][std::min(xi, S - 1)];
                    const double band_bot = curves[bands][std::min(xi, S - 1)];
                    const double cy = rng.uniform(band_top + r * 0.5, band_bot - r * 0.5);
                    const double slo_y = rng.uniform(r, static_cast<double>(S) - r);
                    for (long y = 0; y < static_cast<long>(S); ++y)
                        for (long x = 0; x < static_cast<long>(S); ++x) {
                            const double d2o = (y - cy) * (y - cy) + (x - cx) * (x - cx);
                            if (d2o < r * r) {
                                s.oct.at(y, x) = std::clamp(
                                    0.95 * (1.0 + cfg.speckle * rng.uniform(-1.0, 1.0)), 0.0, 1.0);
                                s.layers->at(y, x) = lesion_class;
                            }
                            const double d2s =
                                (y - slo_y) * (y - slo_y) + (x - cx) * (x - cx);
                            if (d2s < r * r) s.slo->at(y, x) = 0.9;
                        }
                }
            }
            s.label = has_lesion ? 1 : 0;
            s.mask = *s.layers;

            ManifestRow row;
            row.sample_id = s.sample_id;
            row.patient_id = s.patient_id;
            row.split = "train";  // reassigned by split_stratified
            row.label = s.label;
            row.spacing_x = s.spacing.mm_x;
            row.spacing_y = s.spacing.mm_y;
            row.slice_mm = s.spacing.mm_slice;
            out.manifest.push_back(row);
            out.samples.push_back(std::move(s));
        }
    }
    return out;
}

// ---- stratified patient split ----

// Greedy patient assignment balancing per-label patient counts against the
// requested ratios; patients never cross splits.
inline std::vector<std::string> split_stratified(const std::vector<ManifestRow>& rows,
                                                 const std::array<double, 3>& ratios,
                                                 std::uint64_t seed) {
    const double rsum = ratios[0] + ratios[1] + ratios[2];
    if (std::abs(rsum - 1.0) > 1e-9)
        throw ConfigError("data", "split ratios must sum to 1");
    // collect patients and their label (first labelled sample wins)
    std::vector<std::string> patients;
    std::map<std::string, int> patient_label;
    for (const auto& r : rows) {
        if (!patient_label.count(r.patient_id)) {
            patients.push_back(r.patient_id);
            patient_label[r.patient_id] = r.label.value_or(0);
        }
    }
    static const char* names[3] = {"train", "val", "test"};
    std::map<std::string, std::string> assignment;
    if (patients.size() == 1) {
        assignment[patients[0]] = "train";
    } else {
        // deterministic shuffle, then greedy fill of the most underfull split
        Rng rng(seed);
        for (std::size_t i = patients.size(); i > 1; --i)
            std::swap(patients[i - 1], patients[rng.uniform_int(i)]);
        std::map<int, std::array<std::size_t, 3>> per_label_counts;
        std::map<int, std::size_t> label_total;
        for (const auto& p : patients) ++label_total[patient_label[p]];
        for (const auto& p : patients) {
            const int lbl = patient_label[p];
            auto& counts = per_label_counts[lbl];
            const double total = static_cast<double>(label_total[lbl]);
            int best = 0;
            double best_deficit = -1e300;
            for (int k = 0; k < 3; ++k) {
                const double deficit =
                    ratios[k] * total - static_cast<double>(counts[k]);
                if (deficit > best_deficit + 1e-12) {
                    best_deficit = deficit;
                    best = k;
                }
            }
            ++counts[best];
            assignment[p] = names[best];
        }
    }
    std::vector<std::string> out;
    out.reserve(rows.size());
    for (const auto& r : rows) out.push_back(assignment.at(r.patient_id));
    return out;
}

// ---- dataset on disk ----

inline void write_dataset(const std::string& root, PhantomDataset& ds) {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(root) / "images");
    fs::create_directories(fs::path(root) / "masks");
    for (std::size_t i = 0; i < ds.samples.size(); ++i) {
        const Sample& s = ds.samples[i];
        ManifestRow& row = ds.manifest[i];
        row.oct_path = "images/" + s.sample_id + "_oct.pgm";
        write_pgm16((fs::path(root) / row.oct_path).string(), s.oct);
        if (s.slo) {
            row.slo_path = "images/" + s.sample_id + "_slo.pgm";
            write_pgm16((fs::path(root) / row.slo_path).string(), *s.slo);
        }
        if (s.layers) {
            row.layers_path = "masks/" + s.sample_id + "_layers.pgm";
            write_pgm8((fs::path(root) / row.layers_path).string(), *s.layers);
        }
        if (s.mask) {
            row.mask_path = "masks/" + s.sample_id + "_mask.pgm";
            write_pgm8((fs::path(root) / row.mask_path).string(), *s.mask);
        }
    }
    write_manifest((fs::path(root) / "manifest.csv").string(), ds.manifest);
}

struct LoadedDataset {
    std::vector<Sample> samples;
    std::vector<ManifestRow> manifest;
};

inline LoadedDataset load_dataset(const std::string& root,
                                  std::size_t max_layer_classes = 256) {
    namespace fs = std::filesystem;
    LoadedDataset out;
    out.manifest = read_manifest((fs::path(root) / "manifest.csv").string());
    for (const auto& row : out.manifest) {
        Sample s;
        s.sample_id = row.sample_id;
        s.patient_id = row.patient_id;
        s.label = row.label;
        s.spacing = {row.spacing_x, row.spacing_y, row.slice_mm};
        auto load_plane = [&](const std::string& rel) {
            const RawPgm raw = read_pgm((fs::path(root) / rel).string());
            ImagePlane img(raw.height, raw.width);
            for (std::size_t i = 0; i < raw.samples.size(); ++i)
                img.values[i] =
                    static_cast<double>(raw.samples[i]) / static_cast<double>(raw.maxval);
            normalize_minmax(img);
            return img;
        };
        auto load_map = [&](const std::string& rel) {
            const RawPgm raw = read_pgm((fs::path(root) / rel).string());
            LayerMap map(raw.height, raw.width);
            for (std::size_t i = 0; i < raw.samples.size(); ++i) {
                if (raw.samples[i] >= max_layer_classes)
                    throw DataError("data", "class index " + std::to_string(raw.samples[i]) +
                                                " out of range in " + rel);
                map.values[i] = static_cast<int>(raw.samples[i]);
            }
            return map;
        };
        s.oct = load_plane(row.oct_path);
        if (!row.slo_path.empty()) s.slo = load_plane(row.slo_path);
        if (!row.layers_path.empty()) s.layers = load_map(row.layers_path);
        if (!row.mask_path.empty()) s.mask = load_map(row.mask_path);
        out.samples.push_back(std::move(s));
    }
    return out;
}

// ---- paired augmentation ----

struct AugmentPolicy {
    double flip_prob = 0.5;
    double rot_deg = 10.0;
    double trans_frac = 0.05;
    double scale_min = 0.9, scale_max = 1.1;
    double intensity_shift = 0.1;

    static AugmentPolicy identity() { return {0.0, 0.0, 0.0, 1.0, 1.0, 0.0}; }
};

struct TransformParams {
    bool flip = false;
    double angle_rad = 0.0;
    double tx = 0.0, ty = 0.0;  // pixels
    double scale = 1.0;
    double intensity_delta = 0.0;
};

inline TransformParams sample_transform(Rng& rng, const AugmentPolicy& policy,
                                        std::size_t H, std::size_t W) {
    TransformParams t;
    t.flip = rng.uniform() < policy.flip_prob;
    t.angle_rad = rng.uniform(-policy.rot_deg, policy.rot_deg) * M_PI / 180.0;
    t.tx = rng.uniform(-policy.trans_frac, policy.trans_frac) * static_cast<double>(W);
    t.ty = rng.uniform(-policy.trans_frac, policy.trans_frac) * static_cast<double>(H);
    t.scale = rng.uniform(policy.scale_min, policy.scale_max);
    t.intensity_delta = rng.uniform(-policy.intensity_shift, policy.intensity_shift);
    return t;
}

namespace detail {

// inverse-mapped source coordinates for output pixel (y, x)
inline std::pair<double, double> source_coords(const TransformParams& t, double y, double x,
                                               double H, double W) {
    if (t.flip) x = W - 1.0 - x;
    const double cy = 0.5 * (H - 1.0), cx = 0.5 * (W - 1.0);
    double dy = y - cy - t.ty, dx = x - cx - t.tx;
    const double c = std::cos(-t.angle_rad), s = std::sin(-t.angle_rad);
    const double ry = (c * dy - s * dx) / t.scale;
    const double rx = (s * dy + c * dx) / t.scale;
    return {ry + cy, rx + cx};
}

}  // namespace detail

inline ImagePlane transform_plane(const ImagePlane& img, const TransformParams& t) {
    const double H = static_cast<double>(img.height), W = static_cast<double>(img.width);
    ImagePlane out(img.height, img.width);
    for (std::size_t y = 0; y < img.height; ++y)
        for (std::size_t x = 0; x < img.width; ++x) {
            auto [sy, sx] = detail::source_coords(t, static_cast<double>(y),
                                                  static_cast<double>(x), H, W);
            double v = 0.0;
            if (sy >= 0.0 && sx >= 0.0 && sy <= H - 1.0 && sx <= W - 1.0) {
                const std::size_t y0 = static_cast<std::size_t>(sy);
                const std::size_t x0 = static_cast<std::size_t>(sx);
                const std::size_t y1 = std::min(y0 + 1, img.height - 1);
                const std::size_t x1 = std::min(x0 + 1, img.width - 1);
                const double fy = sy - static_cast<double>(y0);
                const double fx = sx - static_cast<double>(x0);
                v = img.at(y0, x0) * (1 - fy) * (1 - fx) + img.at(y0, x1) * (1 - fy) * fx +
                    img.at(y1, x0) * fy * (1 - fx) + img.at(y1, x1) * fy * fx;
            }
            out.at(y, x) = std::clamp(v + t.intensity_delta, 0.0, 1.0);
        }
    return out;
}

inline LayerMap transform_map(const LayerMap& map, const TransformParams& t) {
    const double H = static_cast<double>(map.height), W = static_cast<double>(map.width);
    LayerMap out(map.height, map.width);
    for (std::size_t y = 0; y < map.height; ++y)
        for (std::size_t x = 0; x < map.width; ++x) {
            auto [sy, sx] = detail::source_coords(t, static_cast<double>(y),
                                                  static_cast<double>(x), H, W);
            const long ry = static_cast<long>(std::lround(sy));
            const long rx = static_cast<long>(std::lround(sx));
            int v = 0;
            if (ry >= 0 && rx >= 0 && ry < static_cast<long>(map.height) &&
                rx < static_cast<long>(map.width))
                v = map.at(static_cast<std::size_t>(ry), static_cast<std::size_t>(rx));
            out.at(y, x) = v;
        }
    return out;
}

// One geometric transform sampled once and applied to all planes; intensity
// shift touches intensity planes only.
inline Sample apply_transform(const Sample& s, const TransformParams& t) {
    Sample out = s;
    out.oct = transform_plane(s.oct, t);
    if (s.slo) out.slo = transform_plane(*s.slo, t);
    TransformParams geom = t;
    geom.intensity_delta = 0.0;
    if (s.layers) out.layers = transform_map(*s.layers, geom);
    if (s.mask) out.mask = transform_map(*s.mask, geom);
    return out;
}

inline Sample augment(const Sample& s, Rng& rng, const AugmentPolicy& policy) {
    return apply_transform(s, sample_transform(rng, policy, s.oct.height, s.oct.width));
}

}  // namespace trimae
