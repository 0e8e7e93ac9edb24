#include "segkc/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numeric>

namespace segkc {

namespace {

struct Rgb {
    double r, g, b;
};

Rgb hsv_to_rgb(double h, double s, double v) {
    const double c = v * s;
    const double hp = h / 60.0;
    const double x = c * (1.0 - std::fabs(std::fmod(hp, 2.0) - 1.0));
    double r = 0, g = 0, b = 0;
    if (hp < 1) {
        r = c, g = x;
    } else if (hp < 2) {
        r = x, g = c;
    } else if (hp < 3) {
        g = c, b = x;
    } else if (hp < 4) {
        g = x, b = c;
    } else if (hp < 5) {
        r = x, b = c;
    } else {
        r = c, b = x;
    }
    const double m = v - c;
    return {r + m, g + m, b + m};
}

Rgb class_color(int cls, int num_classes) {
    if (cls == 0) return {0.34, 0.35, 0.37};  // background
    const double hue = 360.0 * static_cast<double>(cls - 1) /
                       static_cast<double>(std::max(1, num_classes - 1));
    return hsv_to_rgb(hue, 0.55, 0.78);
}

struct Shape {
    int kind;  // 0 rect, 1 disk, 2 triangle
    int cls;
    double cx, cy, extent;
    double x0, y0, x1, y1, x2, y2;  // triangle vertices
    Rgb color;

    bool contains(double x, double y) const {
        switch (kind) {
            case 0:
                return std::fabs(x - cx) <= extent && std::fabs(y - cy) <= extent * 0.8;
            case 1: {
                const double dx = x - cx, dy = y - cy;
                return dx * dx + dy * dy <= extent * extent;
            }
            default: {
                const auto side = [](double ax, double ay, double bx, double by, double px,
                                     double py) {
                    return (bx - ax) * (py - ay) - (by - ay) * (px - ax);
                };
                const double d0 = side(x0, y0, x1, y1, x, y);
                const double d1 = side(x1, y1, x2, y2, x, y);
                const double d2 = side(x2, y2, x0, y0, x, y);
                const bool has_neg = d0 < 0 || d1 < 0 || d2 < 0;
                const bool has_pos = d0 > 0 || d1 > 0 || d2 > 0;
                return !(has_neg && has_pos);
            }
        }
    }
};

constexpr double kColorJitter = 0.10;
// Per-image multiplicative color cast. Class colors are only identifiable
// relative to the casted background, so image-level variety matters.
constexpr double kColorCast = 0.40;

void skip_pnm_space(std::istream& is) {
    int c = is.peek();
    while (c == '#' || std::isspace(c)) {
        if (c == '#') {
            std::string line;
            std::getline(is, line);
        } else {
            is.get();
        }
        c = is.peek();
    }
}

std::vector<std::uint8_t> read_pnm(const std::string& path, const char* magic, int channels,
                                   int* h, int* w) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open image: " + path);
    char m0 = 0, m1 = 0;
    is.get(m0);
    is.get(m1);
    if (m0 != magic[0] || m1 != magic[1]) {
        throw DataError("unexpected image format in " + path);
    }
    int width = 0, height = 0, maxval = 0;
    skip_pnm_space(is);
    is >> width;
    skip_pnm_space(is);
    is >> height;
    skip_pnm_space(is);
    is >> maxval;
    if (!is || width <= 0 || height <= 0 || maxval != 255) {
        throw DataError("bad image header in " + path);
    }
    is.get();  // single whitespace after maxval
    std::vector<std::uint8_t> data(static_cast<std::size_t>(width) * height * channels);
    is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size()));
    if (!is) throw DataError("truncated image data in " + path);
    *h = height;
    *w = width;
    return data;
}

void write_pnm(const std::string& path, const char* magic, int channels, int h, int w,
               const std::vector<std::uint8_t>& data) {
    if (data.size() != static_cast<std::size_t>(h) * w * channels) {
        throw DataError("image buffer size does not match dimensions");
    }
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot write image: " + path);
    os << magic << "\n" << w << " " << h << "\n255\n";
    os.write(reinterpret_cast<const char*>(data.data()),
             static_cast<std::streamsize>(data.size()));
    if (!os) throw DataError("failed writing image: " + path);
}

}  // namespace

void SceneSpec::validate() const {
    if (image_h < 4 || image_w < 4) throw ConfigError("scene image size too small");
    if (num_classes < 2) throw ConfigError("scene num_classes must be >= 2");
    if (shapes_min < 0 || shapes_max < shapes_min) {
        throw ConfigError("scene shape count range invalid");
    }
    if (noise_sigma < 0) throw ConfigError("scene noise_sigma must be non-negative");
}

SegSample generate_scene(const SceneSpec& spec, int index) {
    spec.validate();
    if (index < 0) throw ContractError("scene index must be non-negative");
    Rng rng(Rng::derive(spec.seed, 0x7363656e65ULL) ^ (static_cast<std::uint64_t>(index) * 0x9e3779b97f4a7c15ULL + 1));

    const int h = spec.image_h, w = spec.image_w;
    SegSample sample;
    sample.h = h;
    sample.w = w;
    sample.image.resize(static_cast<std::size_t>(3) * h * w);
    sample.labels.assign(static_cast<std::size_t>(h) * w, 0);

    const Rgb bg = class_color(0, spec.num_classes);
    const double brightness = rng.uniform(-0.04, 0.04);
    double cast[3];
    for (auto& g : cast) g = rng.uniform(1.0 - kColorCast, 1.0 + kColorCast);
    const double bgc[3] = {bg.r + brightness, bg.g + brightness, bg.b + brightness};
    for (int c = 0; c < 3; ++c) {
        std::fill(sample.image.begin() + static_cast<std::size_t>(c) * h * w,
                  sample.image.begin() + static_cast<std::size_t>(c + 1) * h * w,
                  static_cast<real>(bgc[c]));
    }

    const int num_shapes =
        static_cast<int>(rng.uniform_int(spec.shapes_min, spec.shapes_max));
    const double dim = static_cast<double>(std::min(h, w));
    for (int si = 0; si < num_shapes; ++si) {
        Shape shape;
        shape.kind = static_cast<int>(rng.uniform_int(0, 2));
        shape.cls = static_cast<int>(rng.uniform_int(1, spec.num_classes - 1));
        shape.cx = rng.uniform(0.15, 0.85) * w;
        shape.cy = rng.uniform(0.15, 0.85) * h;
        shape.extent = rng.uniform(0.10, 0.26) * dim;
        if (shape.kind == 2) {
            double angles[3];
            for (auto& a : angles) a = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
            std::sort(std::begin(angles), std::end(angles));
            const double radii[3] = {rng.uniform(0.6, 1.0), rng.uniform(0.6, 1.0),
                                     rng.uniform(0.6, 1.0)};
            shape.x0 = shape.cx + shape.extent * radii[0] * std::cos(angles[0]);
            shape.y0 = shape.cy + shape.extent * radii[0] * std::sin(angles[0]);
            shape.x1 = shape.cx + shape.extent * radii[1] * std::cos(angles[1]);
            shape.y1 = shape.cy + shape.extent * radii[1] * std::sin(angles[1]);
            shape.x2 = shape.cx + shape.extent * radii[2] * std::cos(angles[2]);
            shape.y2 = shape.cy + shape.extent * radii[2] * std::sin(angles[2]);
        }
        const Rgb base = class_color(shape.cls, spec.num_classes);
        shape.color = {base.r + rng.uniform(-kColorJitter, kColorJitter),
                       base.g + rng.uniform(-kColorJitter, kColorJitter),
                       base.b + rng.uniform(-kColorJitter, kColorJitter)};

        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                if (!shape.contains(x + 0.5, y + 0.5)) continue;
                const std::size_t p = static_cast<std::size_t>(y) * w + x;
                sample.labels[p] = shape.cls;
                const std::size_t plane = static_cast<std::size_t>(h) * w;
                sample.image[p] = static_cast<real>(shape.color.r);
                sample.image[plane + p] = static_cast<real>(shape.color.g);
                sample.image[2 * plane + p] = static_cast<real>(shape.color.b);
            }
        }
    }

    // 1-pixel ignore band on the shape side of every label boundary.
    const std::vector<std::int32_t> pristine = sample.labels;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const std::size_t p = static_cast<std::size_t>(y) * w + x;
            const auto lab = pristine[p];
            if (lab == 0) continue;
            const bool edge =
                (x > 0 && pristine[p - 1] != lab) || (x + 1 < w && pristine[p + 1] != lab) ||
                (y > 0 && pristine[p - static_cast<std::size_t>(w)] != lab) ||
                (y + 1 < h && pristine[p + static_cast<std::size_t>(w)] != lab);
            if (edge) sample.labels[p] = kIgnoreIndex;
        }
    }

    const std::size_t plane = static_cast<std::size_t>(h) * w;
    for (int c = 0; c < 3; ++c) {
        for (std::size_t p = 0; p < plane; ++p) {
            sample.image[static_cast<std::size_t>(c) * plane + p] *=
                static_cast<real>(cast[c]);
        }
    }
    if (spec.noise_sigma > 0) {
        for (auto& v : sample.image) {
            v = static_cast<real>(v + spec.noise_sigma * rng.normal());
        }
    }
    for (auto& v : sample.image) v = std::clamp(v, real(0), real(1));
    return sample;
}

// ---------------------------------------------------------------------------
// Splits

SplitManifest make_split(int dataset_size, const std::string& ratio_name, std::uint64_t seed) {
    if (dataset_size < 1) throw ConfigError("dataset_size must be >= 1");
    double ratio = 0;
    if (ratio_name == "1/16") {
        ratio = 1.0 / 16.0;
    } else if (ratio_name == "1/8") {
        ratio = 1.0 / 8.0;
    } else if (ratio_name == "1/4") {
        ratio = 1.0 / 4.0;
    } else if (ratio_name == "1/2") {
        ratio = 1.0 / 2.0;
    } else if (ratio_name == "full") {
        ratio = 1.0;
    } else {
        throw ConfigError("unknown split ratio: " + ratio_name);
    }

    SplitManifest m;
    m.dataset_size = dataset_size;
    m.ratio_name = ratio_name;
    m.seed = seed;

    std::vector<int> ids(static_cast<std::size_t>(dataset_size));
    std::iota(ids.begin(), ids.end(), 0);
    if (ratio_name == "full") {
        m.labeled_ids = ids;
        return m;
    }
    Rng rng(Rng::derive(seed, 0x73706c6974ULL));  // "split"
    rng.shuffle(ids);
    const auto count = static_cast<std::size_t>(
        std::llround(ratio * static_cast<double>(dataset_size)));
    m.labeled_ids.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(count));
    std::sort(m.labeled_ids.begin(), m.labeled_ids.end());
    return m;
}

void SplitManifest::serialize(std::ostream& os) const {
    os << dataset_size << " " << ratio_name << " " << seed << "\n";
    for (int id : labeled_ids) os << id << "\n";
}

SplitManifest SplitManifest::parse(std::istream& is) {
    SplitManifest m;
    if (!(is >> m.dataset_size >> m.ratio_name >> m.seed)) {
        throw DataError("manifest: bad header (expected `size ratio seed`)");
    }
    int id = 0;
    while (is >> id) m.labeled_ids.push_back(id);
    for (std::size_t i = 0; i < m.labeled_ids.size(); ++i) {
        if (m.labeled_ids[i] < 0 || m.labeled_ids[i] >= m.dataset_size) {
            throw DataError("manifest: labeled id out of range");
        }
        if (i > 0 && m.labeled_ids[i] <= m.labeled_ids[i - 1]) {
            throw DataError("manifest: labeled ids must be sorted and unique");
        }
    }
    return m;
}

// ---------------------------------------------------------------------------
// Batch stream

int BatchStream::Pool::take(long* epochs_done) {
    if (cursor >= ids.size()) {
        rng.shuffle(ids);
        cursor = 0;
        if (epochs_done != nullptr) ++(*epochs_done);
    }
    return ids[cursor++];
}

BatchStream::BatchStream(const SceneSpec& spec, const SplitManifest& split,
                         const AugmentConfig& aug, std::uint64_t seed)
    : spec_(spec), aug_(aug) {
    spec_.validate();
    if (split.labeled_ids.empty()) throw ConfigError("empty labeled pool");
    if (aug_.crop_size < 0 || aug_.crop_size > std::min(spec.image_h, spec.image_w)) {
        throw ConfigError("crop_size must be within the image dimensions");
    }

    labeled_.ids = split.labeled_ids;
    std::vector<std::uint8_t> is_lab(static_cast<std::size_t>(split.dataset_size), 0);
    for (int id : split.labeled_ids) is_lab[static_cast<std::size_t>(id)] = 1;
    for (int i = 0; i < split.dataset_size; ++i) {
        if (!is_lab[static_cast<std::size_t>(i)]) unlabeled_.ids.push_back(i);
    }
    epoch_by_labeled_ = unlabeled_.ids.empty();

    labeled_.rng = Rng(Rng::derive(seed, 0x6c616232ULL));
    unlabeled_.rng = Rng(Rng::derive(seed, 0x756e6c61ULL));
    aug_rng_ = Rng(Rng::derive(seed, 0x617567ULL));
    labeled_.rng.shuffle(labeled_.ids);
    unlabeled_.rng.shuffle(unlabeled_.ids);
}

long BatchStream::steps_per_epoch(int batch_size) const {
    const std::size_t pool =
        epoch_by_labeled_ ? labeled_.ids.size() : unlabeled_.ids.size();
    return static_cast<long>((pool + static_cast<std::size_t>(batch_size) - 1) /
                             static_cast<std::size_t>(batch_size));
}

SegSample BatchStream::load_augmented(int index, bool with_labels) {
    SegSample s = generate_scene(spec_, index);
    if (!with_labels) {
        std::fill(s.labels.begin(), s.labels.end(), kIgnoreIndex);
    }
    if (!aug_.enabled) return s;

    const bool flip = aug_rng_.uniform() < 0.5;
    const int crop = aug_.crop_size > 0 ? aug_.crop_size : 0;
    int oy = 0, ox = 0;
    if (crop > 0 && (crop < s.h || crop < s.w)) {
        oy = static_cast<int>(aug_rng_.uniform_int(0, s.h - crop));
        ox = static_cast<int>(aug_rng_.uniform_int(0, s.w - crop));
    }
    const int out_h = crop > 0 ? crop : s.h;
    const int out_w = crop > 0 ? crop : s.w;

    SegSample t;
    t.h = out_h;
    t.w = out_w;
    t.image.resize(static_cast<std::size_t>(3) * out_h * out_w);
    t.labels.resize(static_cast<std::size_t>(out_h) * out_w);
    const std::size_t in_plane = static_cast<std::size_t>(s.h) * s.w;
    const std::size_t out_plane = static_cast<std::size_t>(out_h) * out_w;
    for (int y = 0; y < out_h; ++y) {
        for (int x = 0; x < out_w; ++x) {
            const int sx = flip ? (ox + out_w - 1 - x) : (ox + x);
            const int sy = oy + y;
            const std::size_t src = static_cast<std::size_t>(sy) * s.w + sx;
            const std::size_t dst = static_cast<std::size_t>(y) * out_w + x;
            t.labels[dst] = s.labels[src];
            for (int c = 0; c < 3; ++c) {
                t.image[static_cast<std::size_t>(c) * out_plane + dst] =
                    s.image[static_cast<std::size_t>(c) * in_plane + src];
            }
        }
    }
    return t;
}

StepBatches BatchStream::next(int batch_size) {
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");

    auto build = [&](Pool& pool, bool labeled, long* epoch_ctr) {
        SegBatch batch;
        if (pool.ids.empty()) return batch;
        std::vector<SegSample> samples;
        samples.reserve(static_cast<std::size_t>(batch_size));
        for (int i = 0; i < batch_size; ++i) {
            const int id = pool.take(epoch_ctr);
            batch.ids.push_back(id);
            samples.push_back(load_augmented(id, labeled));
        }
        const int h = samples.front().h, w = samples.front().w;
        const std::size_t plane = static_cast<std::size_t>(h) * w;
        std::vector<real> images(static_cast<std::size_t>(batch_size) * 3 * plane);
        batch.labels.shape = {batch_size, h, w};
        batch.labels.v.resize(static_cast<std::size_t>(batch_size) * plane);
        for (int i = 0; i < batch_size; ++i) {
            std::copy(samples[static_cast<std::size_t>(i)].image.begin(),
                      samples[static_cast<std::size_t>(i)].image.end(),
                      images.begin() + static_cast<std::size_t>(i) * 3 * plane);
            std::copy(samples[static_cast<std::size_t>(i)].labels.begin(),
                      samples[static_cast<std::size_t>(i)].labels.end(),
                      batch.labels.v.begin() + static_cast<std::size_t>(i) * plane);
        }
        batch.images = Tensor::from_values({batch_size, 3, h, w}, std::move(images));
        batch.is_labeled.assign(static_cast<std::size_t>(batch_size), labeled ? 1 : 0);
        return batch;
    };

    StepBatches out;
    out.labeled = build(labeled_, true, epoch_by_labeled_ ? &epoch_ : nullptr);
    out.unlabeled = build(unlabeled_, false, epoch_by_labeled_ ? nullptr : &epoch_);
    return out;
}

void BatchStream::serialize(std::ostream& os) const {
    os << "streamv1 " << epoch_ << " " << (epoch_by_labeled_ ? 1 : 0) << "\n";
    auto dump_pool = [&os](const Pool& p) {
        os << p.cursor << " " << p.ids.size();
        for (int id : p.ids) os << " " << id;
        os << "\n";
        for (auto s : p.rng.state()) os << s << " ";
        os << "\n";
    };
    dump_pool(labeled_);
    dump_pool(unlabeled_);
    for (auto s : aug_rng_.state()) os << s << " ";
    os << "\n";
}

void BatchStream::restore(std::istream& is) {
    std::string tag;
    int by_labeled = 0;
    if (!(is >> tag >> epoch_ >> by_labeled) || tag != "streamv1") {
        throw DataError("stream state: bad header");
    }
    epoch_by_labeled_ = by_labeled != 0;
    auto read_pool = [&is](Pool& p) {
        std::size_t n = 0;
        if (!(is >> p.cursor >> n)) throw DataError("stream state: bad pool header");
        p.ids.resize(n);
        for (auto& id : p.ids) {
            if (!(is >> id)) throw DataError("stream state: truncated pool ids");
        }
        std::array<std::uint64_t, 4> st{};
        for (auto& s : st) {
            if (!(is >> s)) throw DataError("stream state: truncated rng state");
        }
        p.rng.set_state(st);
    };
    read_pool(labeled_);
    read_pool(unlabeled_);
    std::array<std::uint64_t, 4> st{};
    for (auto& s : st) {
        if (!(is >> s)) throw DataError("stream state: truncated rng state");
    }
    aug_rng_.set_state(st);
}

// ---------------------------------------------------------------------------
// Image IO

void write_ppm(const std::string& path, int h, int w, const std::vector<std::uint8_t>& rgb) {
    write_pnm(path, "P6", 3, h, w, rgb);
}

void write_pgm(const std::string& path, int h, int w, const std::vector<std::uint8_t>& gray) {
    write_pnm(path, "P5", 1, h, w, gray);
}

std::vector<std::uint8_t> read_ppm(const std::string& path, int* h, int* w) {
    return read_pnm(path, "P6", 3, h, w);
}

std::vector<std::uint8_t> read_pgm(const std::string& path, int* h, int* w) {
    return read_pnm(path, "P5", 1, h, w);
}

std::vector<std::uint8_t> image_to_u8(const std::vector<real>& image) {
    // planar [3,H,W] in [0,1] -> interleaved RGB
    const std::size_t plane = image.size() / 3;
    std::vector<std::uint8_t> out(image.size());
    for (std::size_t p = 0; p < plane; ++p) {
        for (int c = 0; c < 3; ++c) {
            const real v = std::clamp(image[static_cast<std::size_t>(c) * plane + p], real(0),
                                      real(1));
            out[p * 3 + static_cast<std::size_t>(c)] =
                static_cast<std::uint8_t>(std::lround(v * 255.0));
        }
    }
    return out;
}

}  // namespace segkc
