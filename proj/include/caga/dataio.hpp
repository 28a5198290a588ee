#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "caga/layers.hpp"
#include "caga/ppm.hpp"
#include "caga/rng.hpp"
#include "caga/tensor.hpp"

namespace caga {

template <typename T>
struct Dataset {
    std::vector<Tensor<T>> images;  // (3,H,W), values in [0,1] before normalization
    std::vector<int> labels;
    std::vector<std::string> class_names;
    std::string split_tag;

    std::size_t size() const { return images.size(); }
    int num_classes() const { return static_cast<int>(class_names.size()); }

    void validate() const {
        if (images.size() != labels.size())
            throw ContractError("Dataset: image/label count mismatch");
        for (std::size_t i = 0; i < images.size(); ++i) {
            if (images[i].rank() != 3 || images[i].extent(0) != 3 ||
                images[i].shape() != images[0].shape())
                throw ContractError("Dataset: inconsistent image shapes");
            if (labels[i] < 0 || labels[i] >= num_classes())
                throw ContractError("Dataset: label out of range");
        }
    }
};

// Per-channel normalization statistics, fitted on the training split only.
struct NormStats {
    std::vector<double> mean;    // 3 entries
    std::vector<double> stddev;  // 3 entries, floored at 1e-6
};

template <typename T>
Tensor<T> raw_to_tensor(const RawImage& img) {
    const std::size_t h = static_cast<std::size_t>(img.height);
    const std::size_t w = static_cast<std::size_t>(img.width);
    Tensor<T> t = Tensor<T>::zeros({3, h, w});
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            for (std::size_t c = 0; c < 3; ++c)
                t[c * h * w + y * w + x] =
                    static_cast<T>(img.rgb[(y * w + x) * 3 + c]) / T(255);
    return t;
}

template <typename T>
RawImage tensor_to_raw(const Tensor<T>& t) {
    if (t.rank() != 3 || t.extent(0) != 3)
        throw ContractError("tensor_to_raw: expected (3,H,W), got " + shape_str(t.shape()));
    RawImage img;
    img.height = static_cast<int>(t.extent(1));
    img.width = static_cast<int>(t.extent(2));
    const std::size_t plane = t.extent(1) * t.extent(2);
    img.rgb.resize(plane * 3);
    for (std::size_t i = 0; i < plane; ++i)
        for (std::size_t c = 0; c < 3; ++c) {
            double v = std::clamp(static_cast<double>(t[c * plane + i]), 0.0, 1.0);
            img.rgb[i * 3 + c] = static_cast<unsigned char>(std::lround(v * 255.0));
        }
    return img;
}

// Loads a class-per-directory tree of P6 PPM files. Class order (and hence
// the label indexing) is the byte-wise sort of the directory names; files
// sort the same way inside each class. Images resize bilinearly to
// target_size x target_size.
template <typename T>
Dataset<T> load_image_tree(const std::string& root, int target_size) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(root)) throw IoError("load_image_tree: no such directory: " + root);
    std::vector<std::string> classes;
    for (const auto& e : fs::directory_iterator(root))
        if (e.is_directory()) classes.push_back(e.path().filename().string());
    std::sort(classes.begin(), classes.end());
    if (classes.empty()) throw IoError("load_image_tree: no class directories under " + root);

    Dataset<T> ds;
    ds.class_names = classes;
    ds.split_tag = "all";
    for (std::size_t ci = 0; ci < classes.size(); ++ci) {
        std::vector<std::string> files;
        for (const auto& e : fs::directory_iterator(root + "/" + classes[ci]))
            if (e.is_regular_file() && e.path().extension() == ".ppm")
                files.push_back(e.path().string());
        std::sort(files.begin(), files.end());
        if (files.empty())
            throw IoError("load_image_tree: class directory '" + classes[ci] + "' has no .ppm files");
        for (const auto& f : files) {
            Tensor<T> img = raw_to_tensor<T>(read_ppm(f));
            if (static_cast<int>(img.extent(1)) != target_size ||
                static_cast<int>(img.extent(2)) != target_size)
                img = interpolate_bilinear(img, static_cast<std::size_t>(target_size),
                                           static_cast<std::size_t>(target_size));
            ds.images.push_back(std::move(img));
            ds.labels.push_back(static_cast<int>(ci));
        }
    }
    ds.validate();
    return ds;
}

template <typename T>
void save_image_tree(const Dataset<T>& ds, const std::string& root) {
    namespace fs = std::filesystem;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const std::string dir = root + "/" + ds.class_names[static_cast<std::size_t>(ds.labels[i])];
        std::error_code ec;
        fs::create_directories(dir, ec);
        char name[32];
        std::snprintf(name, sizeof(name), "img_%05zu.ppm", i);
        write_ppm(dir + "/" + name, tensor_to_raw(ds.images[i]));
    }
}

// TNSR batch export: one (N,3,H,W) image tensor, one (N) label tensor (class
// indices stored as the build's scalar type), and a class_names.txt line list.
template <typename T>
void export_dataset_tnsr(const Dataset<T>& ds, const std::string& dir) {
    namespace fs = std::filesystem;
    if (ds.size() == 0) throw ContractError("export_dataset_tnsr: empty dataset");
    std::error_code ec;
    fs::create_directories(dir, ec);
    const std::size_t h = ds.images[0].extent(1), w = ds.images[0].extent(2);
    Tensor<T> batch = Tensor<T>::zeros({ds.size(), 3, h, w});
    Tensor<T> labels = Tensor<T>::zeros({ds.size()});
    for (std::size_t i = 0; i < ds.size(); ++i) {
        std::copy_n(ds.images[i].data(), 3 * h * w, batch.data() + i * 3 * h * w);
        labels[i] = static_cast<T>(ds.labels[i]);
    }
    save_tnsr(batch, dir + "/images.tnsr");
    save_tnsr(labels, dir + "/labels.tnsr");
    std::ofstream names(dir + "/class_names.txt");
    if (!names) throw IoError("export_dataset_tnsr: cannot write class_names.txt");
    for (const auto& n : ds.class_names) names << n << "\n";
}

template <typename T>
NormStats fit_zscore(const Dataset<T>& train) {
    if (train.size() == 0) throw ContractError("fit_zscore: empty training split");
    NormStats st;
    st.mean.assign(3, 0.0);
    st.stddev.assign(3, 0.0);
    const std::size_t plane = train.images[0].extent(1) * train.images[0].extent(2);
    const double n = static_cast<double>(plane * train.size());
    for (const auto& img : train.images)
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t i = 0; i < plane; ++i)
                st.mean[c] += static_cast<double>(img[c * plane + i]);
    for (auto& m : st.mean) m /= n;
    for (const auto& img : train.images)
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t i = 0; i < plane; ++i) {
                const double d = static_cast<double>(img[c * plane + i]) - st.mean[c];
                st.stddev[c] += d * d;
            }
    for (std::size_t c = 0; c < 3; ++c) {
        st.stddev[c] = std::sqrt(st.stddev[c] / n);
        if (st.stddev[c] < 1e-6) {
            std::cerr << "fit_zscore: channel " << c << " variance is ~0, flooring std to 1e-6\n";
            st.stddev[c] = 1e-6;
        }
    }
    return st;
}

template <typename T>
Tensor<T> apply_zscore_image(const Tensor<T>& img, const NormStats& st) {
    Tensor<T> out = img.deep_copy();
    const std::size_t plane = img.extent(1) * img.extent(2);
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < plane; ++i)
            out[c * plane + i] = static_cast<T>(
                (static_cast<double>(img[c * plane + i]) - st.mean[c]) / st.stddev[c]);
    return out;
}

template <typename T>
Tensor<T> unapply_zscore_image(const Tensor<T>& img, const NormStats& st) {
    Tensor<T> out = img.deep_copy();
    const std::size_t plane = img.extent(1) * img.extent(2);
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < plane; ++i)
            out[c * plane + i] = static_cast<T>(
                static_cast<double>(img[c * plane + i]) * st.stddev[c] + st.mean[c]);
    return out;
}

template <typename T>
Dataset<T> apply_zscore(const Dataset<T>& ds, const NormStats& st) {
    Dataset<T> out;
    out.labels = ds.labels;
    out.class_names = ds.class_names;
    out.split_tag = ds.split_tag;
    for (const auto& img : ds.images) out.images.push_back(apply_zscore_image(img, st));
    return out;
}

inline void save_norm_stats(const NormStats& st, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw IoError("save_norm_stats: cannot write " + path);
    char buf[256];
    for (std::size_t c = 0; c < 3; ++c) {
        std::snprintf(buf, sizeof(buf), "mean%zu=%.17g\nstd%zu=%.17g\n", c, st.mean[c], c,
                      st.stddev[c]);
        os << buf;
    }
}

inline NormStats load_norm_stats(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("load_norm_stats: cannot open " + path);
    NormStats st;
    st.mean.assign(3, 0.0);
    st.stddev.assign(3, 1.0);
    std::string line;
    while (std::getline(is, line)) {
        const auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        const std::string key = line.substr(0, eq);
        const double val = std::stod(line.substr(eq + 1));
        if (key.rfind("mean", 0) == 0) st.mean[static_cast<std::size_t>(key[4] - '0')] = val;
        if (key.rfind("std", 0) == 0) st.stddev[static_cast<std::size_t>(key[3] - '0')] = val;
    }
    return st;
}

// ---- augmentation -----------------------------------------------------

// Magnitudes are conservative and configurable; each transform fires with
// probability `prob` inside augment().
struct AugmentPolicy {
    double prob = 0.5;
    double max_rotate_deg = 15.0;
    double max_translate_frac = 0.1;
    bool reflect = true;
    double max_shear = 0.1;
    double scale_lo = 0.9, scale_hi = 1.1;
    double max_hue_shift = 0.05;       // fraction of the hue circle
    double sat_lo = 0.8, sat_hi = 1.2;
    double contrast_lo = 0.8, contrast_hi = 1.2;
    double max_brightness = 0.1;
    double noise_std = 0.02;

    static AugmentPolicy identity() {
        AugmentPolicy p;
        p.prob = 0.0;
        return p;
    }
};

namespace detail {

// Inverse-mapped affine warp with bilinear sampling; source coordinates are
// clamped to the image (edge extension). Matrix maps destination pixel
// coordinates to source coordinates: src = M * (dst - c) + c + t.
template <typename T>
Tensor<T> warp_affine(const Tensor<T>& img, double m00, double m01, double m10, double m11,
                      double tx, double ty) {
    const std::size_t h = img.extent(1), w = img.extent(2);
    const double cy = (static_cast<double>(h) - 1.0) / 2.0;
    const double cx = (static_cast<double>(w) - 1.0) / 2.0;
    Tensor<T> out = Tensor<T>::zeros(img.shape());
    const std::size_t plane = h * w;
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            const double dx = static_cast<double>(x) - cx;
            const double dy = static_cast<double>(y) - cy;
            double sx = m00 * dx + m01 * dy + cx + tx;
            double sy = m10 * dx + m11 * dy + cy + ty;
            sx = std::clamp(sx, 0.0, static_cast<double>(w - 1));
            sy = std::clamp(sy, 0.0, static_cast<double>(h - 1));
            const std::size_t x0 = static_cast<std::size_t>(sx);
            const std::size_t y0 = static_cast<std::size_t>(sy);
            const std::size_t x1 = std::min(x0 + 1, w - 1);
            const std::size_t y1 = std::min(y0 + 1, h - 1);
            const double fx = sx - static_cast<double>(x0);
            const double fy = sy - static_cast<double>(y0);
            for (std::size_t c = 0; c < 3; ++c) {
                const T* p = img.data() + c * plane;
                const double top = static_cast<double>(p[y0 * w + x0]) * (1 - fx) +
                                   static_cast<double>(p[y0 * w + x1]) * fx;
                const double bot = static_cast<double>(p[y1 * w + x0]) * (1 - fx) +
                                   static_cast<double>(p[y1 * w + x1]) * fx;
                out[c * plane + y * w + x] = static_cast<T>(top * (1 - fy) + bot * fy);
            }
        }
    return out;
}

// RGB -> HSV, all components in [0,1]:
//   V = max(r,g,b); S = (V - min)/V (0 when V = 0);
//   H = sector formula over the dominant channel, wrapped to [0,1).
inline void rgb_to_hsv(double r, double g, double b, double& h, double& s, double& v) {
    const double mx = std::max({r, g, b}), mn = std::min({r, g, b});
    v = mx;
    const double d = mx - mn;
    s = mx <= 0.0 ? 0.0 : d / mx;
    if (d <= 0.0) {
        h = 0.0;
        return;
    }
    if (mx == r)
        h = (g - b) / d;
    else if (mx == g)
        h = 2.0 + (b - r) / d;
    else
        h = 4.0 + (r - g) / d;
    h /= 6.0;
    if (h < 0.0) h += 1.0;
}

// HSV -> RGB: i = floor(6h) selects the sector; p/q/t interpolate.
inline void hsv_to_rgb(double h, double s, double v, double& r, double& g, double& b) {
    h = h - std::floor(h);
    const int i = static_cast<int>(h * 6.0) % 6;
    const double f = h * 6.0 - std::floor(h * 6.0);
    const double p = v * (1.0 - s);
    const double q = v * (1.0 - f * s);
    const double t = v * (1.0 - (1.0 - f) * s);
    switch (i) {
        case 0: r = v; g = t; b = p; break;
        case 1: r = q; g = v; b = p; break;
        case 2: r = p; g = v; b = t; break;
        case 3: r = p; g = q; b = v; break;
        case 4: r = t; g = p; b = v; break;
        default: r = v; g = p; b = q; break;
    }
}

} // namespace detail

// Positive angle rotates clockwise in pixel coordinates (y down). Multiples
// of 90 degrees land exactly on pixel centers.
template <typename T>
Tensor<T> rotate_image(const Tensor<T>& img, double degrees) {
    const double a = degrees * 3.14159265358979323846 / 180.0;
    // inverse rotation
    return detail::warp_affine(img, std::cos(a), std::sin(a), -std::sin(a), std::cos(a), 0, 0);
}

template <typename T>
Tensor<T> translate_image(const Tensor<T>& img, double dx_px, double dy_px) {
    return detail::warp_affine(img, 1, 0, 0, 1, -dx_px, -dy_px);
}

template <typename T>
Tensor<T> shear_image(const Tensor<T>& img, double kx, double ky) {
    return detail::warp_affine(img, 1, kx, ky, 1, 0, 0);
}

template <typename T>
Tensor<T> scale_image(const Tensor<T>& img, double factor) {
    if (factor <= 0) throw ContractError("scale_image: factor must be positive");
    const double inv = 1.0 / factor;
    return detail::warp_affine(img, inv, 0, 0, inv, 0, 0);
}

template <typename T>
Tensor<T> reflect_image_h(const Tensor<T>& img) {
    const std::size_t h = img.extent(1), w = img.extent(2), plane = h * w;
    Tensor<T> out = Tensor<T>::zeros(img.shape());
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x)
                out[c * plane + y * w + x] = img[c * plane + y * w + (w - 1 - x)];
    return out;
}

template <typename T>
Tensor<T> adjust_hsv(const Tensor<T>& img, double hue_shift, double sat_factor) {
    const std::size_t plane = img.extent(1) * img.extent(2);
    Tensor<T> out = img.deep_copy();
    for (std::size_t i = 0; i < plane; ++i) {
        double h, s, v, r, g, b;
        detail::rgb_to_hsv(static_cast<double>(img[i]), static_cast<double>(img[plane + i]),
                           static_cast<double>(img[2 * plane + i]), h, s, v);
        h += hue_shift;
        s = std::clamp(s * sat_factor, 0.0, 1.0);
        detail::hsv_to_rgb(h, s, v, r, g, b);
        out[i] = static_cast<T>(r);
        out[plane + i] = static_cast<T>(g);
        out[2 * plane + i] = static_cast<T>(b);
    }
    return out;
}

template <typename T>
void clamp01(Tensor<T>& img) {
    for (std::size_t i = 0; i < img.size(); ++i)
        img[i] = std::clamp(img[i], T(0), T(1));
}

// Applies a randomly sampled subset of the policy's transforms. Shape and
// label are untouched; the result stays in [0,1]. Deterministic per rng state.
template <typename T>
Tensor<T> augment(const Tensor<T>& image, Rng& rng, const AugmentPolicy& policy) {
    Tensor<T> img = image;
    if (policy.prob <= 0.0) return img.deep_copy();
    if (rng.next_double() < policy.prob)
        img = rotate_image(img, rng.uniform(-policy.max_rotate_deg, policy.max_rotate_deg));
    if (rng.next_double() < policy.prob) {
        const double r = policy.max_translate_frac * static_cast<double>(img.extent(2));
        img = translate_image(img, rng.uniform(-r, r), rng.uniform(-r, r));
    }
    if (policy.reflect && rng.next_double() < policy.prob) img = reflect_image_h(img);
    if (rng.next_double() < policy.prob)
        img = shear_image(img, rng.uniform(-policy.max_shear, policy.max_shear),
                          rng.uniform(-policy.max_shear, policy.max_shear));
    if (rng.next_double() < policy.prob)
        img = scale_image(img, rng.uniform(policy.scale_lo, policy.scale_hi));
    if (rng.next_double() < policy.prob)
        img = adjust_hsv(img, rng.uniform(-policy.max_hue_shift, policy.max_hue_shift),
                         rng.uniform(policy.sat_lo, policy.sat_hi));
    if (rng.next_double() < policy.prob) {
        const double contrast = rng.uniform(policy.contrast_lo, policy.contrast_hi);
        const double bright = rng.uniform(-policy.max_brightness, policy.max_brightness);
        img = img.deep_copy();
        for (std::size_t i = 0; i < img.size(); ++i)
            img[i] = static_cast<T>((static_cast<double>(img[i]) - 0.5) * contrast + 0.5 + bright);
    }
    if (policy.noise_std > 0.0 && rng.next_double() < policy.prob) {
        img = img.deep_copy();
        for (std::size_t i = 0; i < img.size(); ++i)
            img[i] += static_cast<T>(rng.next_normal() * policy.noise_std);
    }
    if (img.same_storage(image)) img = img.deep_copy();
    clamp01(img);
    return img;
}

// Offline expansion: the original samples plus `extra_per_sample` augmented
// copies of each.
template <typename T>
Dataset<T> expand_dataset(const Dataset<T>& ds, int extra_per_sample,
                          const AugmentPolicy& policy, unsigned long long seed) {
    Dataset<T> out;
    out.class_names = ds.class_names;
    out.split_tag = ds.split_tag + "+aug";
    for (std::size_t i = 0; i < ds.size(); ++i) {
        out.images.push_back(ds.images[i]);
        out.labels.push_back(ds.labels[i]);
        for (int j = 0; j < extra_per_sample; ++j) {
            Rng rng = Rng::for_sample(seed, i * 1000 + static_cast<std::size_t>(j));
            out.images.push_back(augment(ds.images[i], rng, policy));
            out.labels.push_back(ds.labels[i]);
        }
    }
    return out;
}

// Parametric texture classes: oriented stripes at a class-specific angle,
// class-dependent Gaussian blob counts, a class tint and pixel noise.
// Separable enough for smoke training, not linearly trivial. Deterministic
// per seed.
template <typename T>
Dataset<T> synth_dataset(int num_classes, int per_class, int size,
                         unsigned long long seed) {
    if (num_classes < 2 || num_classes > 8)
        throw ContractError("synth_dataset: num_classes must be in [2,8]");
    if (per_class < 1 || size < 4) throw ContractError("synth_dataset: bad per_class/size");
    constexpr double kPi = 3.14159265358979323846;
    Dataset<T> ds;
    ds.split_tag = "synth";
    for (int c = 0; c < num_classes; ++c)
        ds.class_names.push_back("class_" + std::to_string(c));

    const std::size_t plane = static_cast<std::size_t>(size) * size;
    for (int c = 0; c < num_classes; ++c) {
        const double angle = kPi * static_cast<double>(c) / static_cast<double>(num_classes);
        const double ca = std::cos(angle), sa = std::sin(angle);
        double tint[3];
        for (int ch = 0; ch < 3; ++ch)
            tint[ch] = 0.5 * std::cos(2.0 * kPi * (static_cast<double>(c) / num_classes +
                                                   static_cast<double>(ch) / 3.0));
        for (int i = 0; i < per_class; ++i) {
            const std::size_t sample_index =
                static_cast<std::size_t>(c) * static_cast<std::size_t>(per_class) +
                static_cast<std::size_t>(i);
            Rng rng = Rng::for_sample(seed, sample_index);
            const double freq = 3.0 + rng.uniform(-0.3, 0.3);
            const double phase = rng.uniform(0.0, 2.0 * kPi);
            const int blobs = 1 + (c % 4);
            std::vector<double> bx(blobs), by(blobs);
            for (int bidx = 0; bidx < blobs; ++bidx) {
                bx[bidx] = rng.uniform(0.2, 0.8) * size;
                by[bidx] = rng.uniform(0.2, 0.8) * size;
            }
            const double sigma = static_cast<double>(size) / 8.0;
            Tensor<T> img = Tensor<T>::zeros({3, static_cast<std::size_t>(size),
                                              static_cast<std::size_t>(size)});
            for (int y = 0; y < size; ++y)
                for (int x = 0; x < size; ++x) {
                    const double u = (x * ca + y * sa) / static_cast<double>(size);
                    double g = 0.5 + 0.25 * std::sin(2.0 * kPi * freq * u + phase);
                    for (int bidx = 0; bidx < blobs; ++bidx) {
                        const double ddx = x - bx[bidx], ddy = y - by[bidx];
                        g += 0.3 * std::exp(-(ddx * ddx + ddy * ddy) / (2.0 * sigma * sigma));
                    }
                    for (int ch = 0; ch < 3; ++ch) {
                        const double v = g + 0.08 * tint[ch] + rng.next_normal() * 0.05;
                        img[static_cast<std::size_t>(ch) * plane +
                            static_cast<std::size_t>(y) * size + static_cast<std::size_t>(x)] =
                            static_cast<T>(std::clamp(v, 0.0, 1.0));
                    }
                }
            ds.images.push_back(std::move(img));
            ds.labels.push_back(c);
        }
    }
    return ds;
}

} // namespace caga
