#pragma once

#include "countgen/counter.hpp"
#include "countgen/denoiser.hpp"
#include "countgen/guidance.hpp"
#include "countgen/scenes.hpp"
#include "countgen/schedule.hpp"

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace countgen {

// The four sampling configurations a benchmark compares. "count" and
// "attention" zero out the other family of scales; "unguided" zeroes both but
// still runs the multi-object path on two-class prompts so attention overlap
// is measured for the baseline too (with all scales zero that path is
// bit-identical to the plain sampler).
enum class GuidanceArm { Unguided = 0, CountOnly = 1, AttentionOnly = 2, Full = 3 };

const char* arm_name(GuidanceArm a);
GuidanceArm arm_from_name(const std::string& name);

struct PromptCase {
    std::vector<std::pair<ObjectClass, int>> entries;  // 1 or 2 distinct classes

    CaptionTokens caption() const;
    std::string slug() const;  // "3-circle", "2-circle_3-square"
    int total() const;
    void validate() const;
};

// Seven prompts covering counts 2..8, cycling through the classes.
std::vector<PromptCase> single_class_prompts();
// First n of a fixed list of two-class prompts with counts 1..4 each.
std::vector<PromptCase> two_class_prompts(int n);

struct BenchmarkSpec {
    std::vector<PromptCase> prompts;
    int seeds_per_prompt = 50;
    std::uint64_t seed = 1;  // root seed; run latents derive from (prompt, seed index)
    std::vector<GuidanceArm> arms;
    GuidanceConfig guidance;  // scales for the arms that use them
    SamplerConfig sampler;    // rng_seed is ignored, set per run
    int n_off = 0;            // count offset applied to every target
    int jobs = 1;             // sampling worker threads; does not affect results

    void validate() const;
    // Canonical one-line form, stored in the output directory and compared on
    // resume. jobs is excluded: it cannot change results.
    std::string echo(const NoiseSchedule& ns) const;
};

// One sampled image scored by the oracle counter.
struct RunRecord {
    int arm_idx = 0;     // index into spec.arms
    int prompt_idx = 0;  // index into spec.prompts
    int seed_idx = 0;
    std::uint64_t rng_seed = 0;
    int oracle_total = 0;
    std::array<int, kNumClasses> oracle_per_class{};
    double iou = 0.0;  // mean per-step attention overlap, NaN when no maps
    std::int64_t skips = 0;
    std::int64_t refine_attempts = 0;
    std::int64_t partition_steps = 0;  // steps where the mask partition was checked
    std::int64_t partition_ok = 0;     // of those, steps where it held
    std::int64_t wall_ms = 0;

    std::string line(const BenchmarkSpec& spec) const;
    // Throws std::runtime_error naming the line number on malformed input.
    static RunRecord parse(const std::string& text, const BenchmarkSpec& spec, int line_no);
};

struct Metrics {
    std::int64_t images = 0;
    double exact = 0.0;        // oracle total equals the prompt total
    double mae = 0.0;          // mean |oracle total - prompt total|
    double class_exact = 0.0;  // mean per-entry class-count match
    double joint = 0.0;        // all entries match and no off-prompt class appears
    double iou = 0.0;          // mean attention overlap, NaN when never measured
    double skip_rate = 0.0;    // skipped refinements / attempted refinements
    double wall_ms = 0.0;      // mean per image; reported in timing.txt only
};

struct ArmMetrics {
    GuidanceArm arm;
    std::vector<Metrics> per_prompt;  // aligned with spec.prompts
    Metrics overall;
};

struct BenchmarkResult {
    std::vector<RunRecord> runs;  // canonical order: arm, prompt, seed
    std::vector<ArmMetrics> arms;
};

// Runs every (arm, prompt, seed) sample missing from out_dir, scoring each
// image with the oracle counter. Artifacts: bench_config.txt (echo guard),
// results.txt (one flushed line per run, the resumable manifest),
// images/<arm>/<slug>_s<idx>.ppm, traces/<arm>/<slug>_s<idx>.txt, metrics.txt
// (deterministic aggregates) and timing.txt (wall times, kept separate so
// metrics.txt is byte-stable). Resuming under a different spec is an error.
BenchmarkResult run_benchmark(const BenchmarkSpec& spec, const DenoiserParams& dn,
                              const CounterParams& ct, const NoiseSchedule& ns,
                              const std::string& out_dir);

// Aggregation used by run_benchmark, exposed for direct testing. Requires the
// full paired grid: every arm must cover every (prompt, seed index) exactly
// once, anything else throws.
std::vector<ArmMetrics> aggregate_runs(const BenchmarkSpec& spec,
                                       const std::vector<RunRecord>& runs);

// Parsed metrics.txt: header metadata plus per-arm tables.
struct MetricsFile {
    std::string path;
    std::vector<std::string> arms;
    std::vector<std::string> prompts;  // slugs
    int seeds_per_prompt = 0;
    std::string spec_echo;
    // metrics[arm index][prompt index]; per-arm overall at prompts.size()
    std::vector<std::vector<Metrics>> table;
};

MetricsFile parse_metrics_file(const std::string& path);

struct ReportRequest {
    std::vector<std::string> metrics_files;
    std::string out_dir;
    int sheet_scale = 4;  // nearest-neighbour upscale factor for contact sheets
};

// Writes report.txt (one table per arm, with an exact-rate delta column
// against the unguided arm when present) and per-prompt contact sheets
// pairing the arms column-wise at equal seeds, one row per seed.
void emit_report(const ReportRequest& req);

}  // namespace countgen
