#include "countgen/scenes.hpp"

#include "countgen/image_io.hpp"
#include "countgen/rng.hpp"

#include <cmath>
#include <cstdio>
#include <deque>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace countgen {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

const char* kNames[kNumClasses] = {"circle", "square", "triangle", "ring"};
const char* kNouns[kNumClasses] = {"circles", "squares", "triangles", "rings"};
const std::array<double, 3> kFills[kNumClasses] = {
    {0.85, 0.20, 0.20},
    {0.20, 0.80, 0.25},
    {0.25, 0.40, 0.90},
    {0.85, 0.80, 0.20},
};
const char* kNumberWords[12] = {"one", "two",   "three", "four", "five",   "six",
                                "seven", "eight", "nine",  "ten",  "eleven", "twelve"};

constexpr int kRingSize = 3;
constexpr int kMaxObjects = 12;
constexpr int kPlaceAttempts = 1000;
constexpr int kLayoutRestarts = 5000;

// Radius of the disc guaranteed to contain every pixel of the object,
// used for the pairwise separation rule.
int bound_radius(ObjectClass cls, int size) {
    switch (cls) {
        case ObjectClass::Circle: return size;
        case ObjectClass::Square:
        case ObjectClass::Triangle: return static_cast<int>(std::ceil(size * std::sqrt(2.0)));
        case ObjectClass::Ring: return kRingSize;
    }
    return size;
}

// Half-extent of the object's bounding box, used for canvas clearance.
int box_extent(ObjectClass cls, int size) {
    return cls == ObjectClass::Ring ? kRingSize : size;
}

int packing_bound(int width) {
    const int rmin = 2;
    const int per_row = (width - 2) / (2 * rmin + 2);
    return per_row * per_row;
}

bool covers(ObjectClass cls, int size, int dx, int dy) {
    const int d2 = dx * dx + dy * dy;
    switch (cls) {
        case ObjectClass::Circle:
            return d2 <= size * size;
        case ObjectClass::Square:
            return std::abs(dx) <= size && std::abs(dy) <= size;
        case ObjectClass::Triangle: {
            if (dy < -size || dy > size) return false;
            const int hw = (dy + size) / 2;
            return std::abs(dx) <= hw;
        }
        case ObjectClass::Ring:
            return d2 > 2 && d2 <= kRingSize * kRingSize;
    }
    return false;
}

}  // namespace

const char* class_name(ObjectClass c) { return kNames[static_cast<int>(c)]; }
const char* class_noun(ObjectClass c) { return kNouns[static_cast<int>(c)]; }
std::array<double, 3> class_fill(ObjectClass c) { return kFills[static_cast<int>(c)]; }

std::optional<ObjectClass> class_from_noun(const std::string& word) {
    for (int i = 0; i < kNumClasses; ++i) {
        if (word == kNouns[i] || word == kNames[i]) return static_cast<ObjectClass>(i);
    }
    return std::nullopt;
}

namespace vocab {

int number_token(int n) {
    if (n < 1 || n > 12) fail("vocabulary covers counts one..twelve, got " + std::to_string(n));
    return 2 + n;
}

int noun_token(ObjectClass c) { return 15 + static_cast<int>(c); }

std::string token_name(int id) {
    if (id == kSot) return "<sot>";
    if (id == kEot) return "<eot>";
    if (id == kPad) return "<pad>";
    if (id == kAnd) return "and";
    if (id >= 3 && id <= 14) return kNumberWords[id - 3];
    if (id >= 15 && id <= 18) return kNouns[id - 15];
    fail("unknown token id " + std::to_string(id));
}

std::optional<int> number_from_word(const std::string& word) {
    for (int i = 0; i < 12; ++i) {
        if (word == kNumberWords[i]) return i + 1;
    }
    return std::nullopt;
}

}  // namespace vocab

int SceneSpec::total_count() const {
    int n = 0;
    for (const auto& [cls, count] : entries) n += count;
    return n;
}

int CaptionTokens::eot_index() const {
    for (int i = 0; i < kCaptionLen; ++i) {
        if (tokens[static_cast<std::size_t>(i)] == vocab::kEot) return i;
    }
    fail("caption has no <eot> token");
}

std::string CaptionTokens::text() const {
    std::string s;
    for (int i = 1; i < eot_index(); ++i) {
        if (!s.empty()) s += ' ';
        s += vocab::token_name(tokens[static_cast<std::size_t>(i)]);
    }
    return s;
}

CaptionTokens caption_of(const SceneSpec& spec) {
    if (spec.entries.empty() || spec.entries.size() > 2) {
        fail("caption_of: spec must have 1 or 2 entries");
    }
    CaptionTokens cap;
    cap.tokens.fill(vocab::kPad);
    cap.tokens[0] = vocab::kSot;
    int pos = 1;
    for (std::size_t i = 0; i < spec.entries.size(); ++i) {
        const auto& [cls, count] = spec.entries[i];
        if (i > 0) cap.tokens[static_cast<std::size_t>(pos++)] = vocab::kAnd;
        cap.tokens[static_cast<std::size_t>(pos++)] = vocab::number_token(count);
        cap.noun_positions.push_back({pos, cls, count});
        cap.tokens[static_cast<std::size_t>(pos++)] = vocab::noun_token(cls);
    }
    cap.tokens[static_cast<std::size_t>(pos)] = vocab::kEot;
    return cap;
}

SceneSpec sample_scene_spec(std::uint64_t seed, int class_count,
                            const std::vector<CountRange>& ranges) {
    if (class_count != 1 && class_count != 2) fail("sample_scene_spec: class_count must be 1 or 2");
    if (ranges.empty() || (ranges.size() != 1 && ranges.size() != static_cast<std::size_t>(class_count))) {
        fail("sample_scene_spec: need one range, or one per class");
    }
    std::vector<CountRange> rr(static_cast<std::size_t>(class_count));
    for (int i = 0; i < class_count; ++i) {
        rr[static_cast<std::size_t>(i)] = ranges.size() == 1 ? ranges[0] : ranges[static_cast<std::size_t>(i)];
        const CountRange& r = rr[static_cast<std::size_t>(i)];
        if (r.lo < 1 || r.lo > r.hi) fail("sample_scene_spec: bad count range");
        const int cap = class_count == 1 ? kMaxObjects : kMaxObjects / 2;
        if (r.hi > cap) {
            fail("sample_scene_spec: up to " + std::to_string(r.hi) + " objects per class requested, but a " +
                 std::to_string(kCanvas) + "x" + std::to_string(kCanvas) + " canvas packs at most " +
                 std::to_string(packing_bound(kCanvas)) + " total (cap " + std::to_string(cap) +
                 " per class here)");
        }
    }

    Rng rng(seed);
    SceneSpec spec;
    const int first = static_cast<int>(rng.uniform_int(kNumClasses));
    spec.entries.emplace_back(static_cast<ObjectClass>(first),
                              rr[0].lo + static_cast<int>(rng.uniform_int(
                                             static_cast<std::uint64_t>(rr[0].hi - rr[0].lo + 1))));
    if (class_count == 2) {
        int second = static_cast<int>(rng.uniform_int(kNumClasses - 1));
        if (second >= first) ++second;
        spec.entries.emplace_back(static_cast<ObjectClass>(second),
                                  rr[1].lo + static_cast<int>(rng.uniform_int(
                                                 static_cast<std::uint64_t>(rr[1].hi - rr[1].lo + 1))));
    }

    const int total = spec.total_count();
    std::vector<Placement> objects;
    for (const auto& [cls, count] : spec.entries) {
        for (int k = 0; k < count; ++k) {
            Placement p;
            p.cls = cls;
            if (cls == ObjectClass::Ring) {
                p.size = kRingSize;
            } else {
                p.size = total > 6 ? 2 : 2 + static_cast<int>(rng.uniform_int(2));
            }
            objects.push_back(p);
        }
    }

    for (int restart = 0; restart < kLayoutRestarts; ++restart) {
        spec.placements.clear();
        bool ok = true;
        for (Placement obj : objects) {
            const int ext = box_extent(obj.cls, obj.size);
            const int span = spec.width - 2 * ext;
            const int rb = bound_radius(obj.cls, obj.size);
            bool placed = false;
            for (int attempt = 0; attempt < kPlaceAttempts; ++attempt) {
                obj.cx = ext + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(span)));
                obj.cy = ext + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(span)));
                bool clear = true;
                for (const Placement& q : spec.placements) {
                    // strict: at exactly r1+r2+1 two hulls can still contain
                    // 4-adjacent pixels (triangle equality), which would merge
                    // components under the oracle
                    const int need = rb + bound_radius(q.cls, q.size) + 1;
                    const std::int64_t dx = obj.cx - q.cx, dy = obj.cy - q.cy;
                    if (dx * dx + dy * dy <= static_cast<std::int64_t>(need) * need) {
                        clear = false;
                        break;
                    }
                }
                if (clear) {
                    spec.placements.push_back(obj);
                    placed = true;
                    break;
                }
            }
            if (!placed) {
                ok = false;
                break;
            }
        }
        if (ok) return spec;
    }
    throw std::runtime_error("sample_scene_spec: could not place " + std::to_string(total) +
                             " objects after " + std::to_string(kLayoutRestarts) + " layouts");
}

int object_bound_radius(const Placement& p) { return bound_radius(p.cls, p.size); }

Tensor render_scene(const SceneSpec& spec) {
    const std::int64_t h = spec.height, w = spec.width;
    Array img = Array::Constant(3 * h * w, kBackground);
    for (const Placement& p : spec.placements) {
        const auto fill = class_fill(p.cls);
        const int ext = box_extent(p.cls, p.size);
        for (int dy = -ext; dy <= ext; ++dy) {
            for (int dx = -ext; dx <= ext; ++dx) {
                if (!covers(p.cls, p.size, dx, dy)) continue;
                const std::int64_t x = p.cx + dx, y = p.cy + dy;
                if (x < 0 || x >= w || y < 0 || y >= h) continue;
                for (int c = 0; c < 3; ++c) img[(c * h + y) * w + x] = fill[static_cast<std::size_t>(c)];
            }
        }
    }
    return Tensor::from_array({3, h, w}, std::move(img), false);
}

LabeledImage make_labeled(const SceneSpec& spec) {
    return LabeledImage{render_scene(spec), spec, caption_of(spec)};
}

OracleResult oracle_count(const Tensor& image) {
    if (image.rank() != 3 || image.dim(0) != 3) {
        fail("oracle_count: expected [3,H,W], got " + shape_str(image.shape()));
    }
    const std::int64_t h = image.dim(1), w = image.dim(2);
    const double* px = image.data();
    auto is_fg = [&](std::int64_t y, std::int64_t x) {
        for (int c = 0; c < 3; ++c) {
            if (std::abs(px[(c * h + y) * w + x] - kBackground) > 0.1) return true;
        }
        return false;
    };

    OracleResult res;
    std::vector<int> label(static_cast<std::size_t>(h * w), 0);
    for (std::int64_t y0 = 0; y0 < h; ++y0) {
        for (std::int64_t x0 = 0; x0 < w; ++x0) {
            if (label[static_cast<std::size_t>(y0 * w + x0)] != 0 || !is_fg(y0, x0)) continue;
            std::vector<std::int64_t> pixels;
            std::deque<std::pair<std::int64_t, std::int64_t>> queue{{y0, x0}};
            label[static_cast<std::size_t>(y0 * w + x0)] = 1;
            while (!queue.empty()) {
                auto [y, x] = queue.front();
                queue.pop_front();
                pixels.push_back(y * w + x);
                const std::int64_t ny[4] = {y - 1, y + 1, y, y};
                const std::int64_t nx[4] = {x, x, x - 1, x + 1};
                for (int k = 0; k < 4; ++k) {
                    if (ny[k] < 0 || ny[k] >= h || nx[k] < 0 || nx[k] >= w) continue;
                    std::size_t idx = static_cast<std::size_t>(ny[k] * w + nx[k]);
                    if (label[idx] == 0 && is_fg(ny[k], nx[k])) {
                        label[idx] = 1;
                        queue.emplace_back(ny[k], nx[k]);
                    }
                }
            }
            if (pixels.size() < 3) continue;
            double mean[3] = {0, 0, 0};
            for (std::int64_t pix : pixels) {
                const std::int64_t y = pix / w, x = pix % w;
                for (int c = 0; c < 3; ++c) mean[c] += px[(c * h + y) * w + x];
            }
            for (int c = 0; c < 3; ++c) mean[c] /= static_cast<double>(pixels.size());
            int best = 0;
            double best_d = 1e300;
            for (int cls = 0; cls < kNumClasses; ++cls) {
                const auto fill = class_fill(static_cast<ObjectClass>(cls));
                double d = 0;
                for (int c = 0; c < 3; ++c) d += (mean[c] - fill[static_cast<std::size_t>(c)]) *
                                                 (mean[c] - fill[static_cast<std::size_t>(c)]);
                if (d < best_d) {
                    best_d = d;
                    best = cls;
                }
            }
            ++res.total;
            ++res.per_class[static_cast<std::size_t>(best)];
            res.component_areas.push_back(static_cast<int>(pixels.size()));
        }
    }
    return res;
}

LabeledImage sample_dataset_item(std::uint64_t root_seed, std::int64_t index,
                                 const DatasetMix& mix) {
    Rng pick(derive_seed(root_seed, "mix", static_cast<std::uint64_t>(index)));
    const bool two = pick.uniform() < mix.two_class_prob;
    const std::uint64_t spec_seed = derive_seed(root_seed, "scene", static_cast<std::uint64_t>(index));
    SceneSpec spec = two ? sample_scene_spec(spec_seed, 2, {mix.two})
                         : sample_scene_spec(spec_seed, 1, {mix.single});
    return make_labeled(spec);
}

void dataset_emit(int n, std::uint64_t seed, const std::string& dir, const DatasetMix& mix) {
    if (n < 0) fail("dataset_emit: n must be >= 0");
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw std::runtime_error("dataset_emit: cannot create " + dir + ": " + ec.message());
    const std::string manifest_path = dir + "/manifest.txt";
    std::ofstream manifest(manifest_path);
    if (!manifest) throw std::runtime_error("dataset_emit: cannot open " + manifest_path);
    for (int i = 0; i < n; ++i) {
        LabeledImage item = sample_dataset_item(seed, i, mix);
        char name[32];
        std::snprintf(name, sizeof(name), "img_%05d.ppm", i);
        write_ppm(dir + "/" + name, item.image);
        std::ostringstream line;
        line << "idx=" << i << " seed=" << seed << " classes=";
        for (std::size_t k = 0; k < item.spec.entries.size(); ++k) {
            if (k) line << ',';
            line << class_name(item.spec.entries[k].first) << ':' << item.spec.entries[k].second;
        }
        line << " tokens=";
        for (int k = 0; k < kCaptionLen; ++k) {
            if (k) line << ',';
            line << item.caption.tokens[static_cast<std::size_t>(k)];
        }
        line << " file=" << name;
        manifest << line.str() << '\n';
    }
    if (!manifest) throw std::runtime_error("dataset_emit: write failed for " + manifest_path);
}

}  // namespace countgen
