#pragma once

#include "countgen/tensor.hpp"

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace countgen {

enum class ObjectClass { Circle = 0, Square = 1, Triangle = 2, Ring = 3 };
constexpr int kNumClasses = 4;
constexpr double kBackground = 0.5;
constexpr int kCanvas = 32;

const char* class_name(ObjectClass c);                 // "circle"
const char* class_noun(ObjectClass c);                 // "circles"
std::array<double, 3> class_fill(ObjectClass c);
std::optional<ObjectClass> class_from_noun(const std::string& word);

namespace vocab {
constexpr int kSot = 0;
constexpr int kEot = 1;
constexpr int kPad = 2;
constexpr int kAnd = 19;
constexpr int kSize = 20;
int number_token(int n);               // 1..12 -> 3..14
int noun_token(ObjectClass c);         // 15..18
std::string token_name(int id);
std::optional<int> number_from_word(const std::string& word);
}  // namespace vocab

struct Placement {
    ObjectClass cls;
    int cx = 0, cy = 0;
    int size = 2;  // circle radius, square/triangle half-extent; rings are fixed at 3
};

struct SceneSpec {
    int width = kCanvas, height = kCanvas;
    std::vector<std::pair<ObjectClass, int>> entries;  // at most 2, distinct classes
    std::vector<Placement> placements;
    int total_count() const;
};

constexpr int kCaptionLen = 8;

struct CaptionTokens {
    std::array<int, kCaptionLen> tokens{};
    struct NounRef {
        int index;
        ObjectClass cls;
        int count;
    };
    std::vector<NounRef> noun_positions;
    int eot_index() const;
    std::string text() const;
};

struct LabeledImage {
    Tensor image;  // [3,H,W] in [0,1]
    SceneSpec spec;
    CaptionTokens caption;
};

struct CountRange {
    int lo = 1, hi = 1;
};

// Draws classes, counts, and non-overlapping placements from the seed.
// ranges holds one entry per class, or a single entry applied to every class.
SceneSpec sample_scene_spec(std::uint64_t seed, int class_count,
                            const std::vector<CountRange>& ranges);

Tensor render_scene(const SceneSpec& spec);
CaptionTokens caption_of(const SceneSpec& spec);
LabeledImage make_labeled(const SceneSpec& spec);

// Radius of the disc guaranteed to contain every pixel of the placement.
int object_bound_radius(const Placement& p);

struct OracleResult {
    int total = 0;
    std::array<int, kNumClasses> per_class{};
    std::vector<int> component_areas;
};

// Independent evaluation counter: threshold against the known background,
// 4-connected flood fill, drop specks under 3 pixels, classify each component
// by nearest class fill color. Not differentiable, never used inside guidance.
OracleResult oracle_count(const Tensor& image);

struct DatasetMix {
    double two_class_prob = 0.4;
    CountRange single{1, 8};
    CountRange two{1, 4};
};

LabeledImage sample_dataset_item(std::uint64_t root_seed, std::int64_t index,
                                 const DatasetMix& mix);

// Writes img_%05d.ppm plus manifest.txt under dir; byte-identical on re-run.
void dataset_emit(int n, std::uint64_t seed, const std::string& dir,
                  const DatasetMix& mix = {});

}  // namespace countgen
