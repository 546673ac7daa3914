#include "countgen/eval.hpp"

#include "countgen/image_io.hpp"
#include "countgen/rng.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <condition_variable>
#include <cstdarg>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <mutex>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <thread>
#include <tuple>

namespace fs = std::filesystem;

namespace countgen {

namespace {

constexpr const char* kArmNames[] = {"unguided", "count", "attention", "full"};

std::string fmt(const char* f, ...) {
    char buf[512];
    va_list ap;
    va_start(ap, f);
    std::vsnprintf(buf, sizeof buf, f, ap);
    va_end(ap);
    return buf;
}

std::vector<std::string> split_ws(const std::string& s) {
    std::istringstream in(s);
    std::vector<std::string> out;
    std::string tok;
    while (in >> tok) out.push_back(tok);
    return out;
}

std::vector<std::string> split_on(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == sep) {
            out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

void atomic_write(const std::string& path, const std::string& content) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write " + tmp);
        out << content;
    }
    fs::rename(tmp, path);
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

double parse_num(const std::string& s, const std::string& where) {
    try {
        std::size_t used = 0;
        double v = std::stod(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw std::runtime_error(where + ": bad number '" + s + "'");
    }
}

std::int64_t parse_int(const std::string& s, const std::string& where) {
    try {
        std::size_t used = 0;
        std::int64_t v = std::stoll(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw std::runtime_error(where + ": bad integer '" + s + "'");
    }
}

std::uint64_t parse_uint(const std::string& s, const std::string& where) {
    try {
        std::size_t used = 0;
        if (!s.empty() && s[0] == '-') throw std::invalid_argument(s);
        std::uint64_t v = std::stoull(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw std::runtime_error(where + ": bad unsigned integer '" + s + "'");
    }
}

// key=value tokens in fixed order; throws naming `where` on any deviation.
class FieldReader {
  public:
    FieldReader(const std::string& text, std::string where)
        : toks_(split_ws(text)), where_(std::move(where)) {}

    std::string take(const std::string& key) {
        if (i_ >= toks_.size()) throw std::runtime_error(where_ + ": missing field " + key);
        const std::string& tok = toks_[i_++];
        const auto eq = tok.find('=');
        if (eq == std::string::npos || tok.substr(0, eq) != key) {
            throw std::runtime_error(where_ + ": expected field " + key + ", got '" + tok + "'");
        }
        return tok.substr(eq + 1);
    }
    double num(const std::string& key) { return parse_num(take(key), where_); }
    std::int64_t integer(const std::string& key) { return parse_int(take(key), where_); }
    std::uint64_t uinteger(const std::string& key) { return parse_uint(take(key), where_); }
    void done() const {
        if (i_ != toks_.size()) {
            throw std::runtime_error(where_ + ": trailing field '" + toks_[i_] + "'");
        }
    }
    const std::string& where() const { return where_; }

  private:
    std::vector<std::string> toks_;
    std::string where_;
    std::size_t i_ = 0;
};

}  // namespace

const char* arm_name(GuidanceArm a) { return kArmNames[static_cast<int>(a)]; }

GuidanceArm arm_from_name(const std::string& name) {
    for (int i = 0; i < 4; ++i) {
        if (name == kArmNames[i]) return static_cast<GuidanceArm>(i);
    }
    throw std::invalid_argument("unknown guidance arm '" + name +
                                "', expected unguided|count|attention|full");
}

// ---- prompts -----------------------------------------------------------------

void PromptCase::validate() const {
    if (entries.empty() || entries.size() > 2) {
        throw std::invalid_argument("prompt must name 1 or 2 object classes");
    }
    if (entries.size() == 2 && entries[0].first == entries[1].first) {
        throw std::invalid_argument("prompt classes must be distinct");
    }
    for (const auto& [cls, n] : entries) {
        (void)cls;
        if (n < 1 || n > 12) {
            throw std::invalid_argument("prompt counts must lie in 1..12, got " +
                                        std::to_string(n));
        }
    }
}

CaptionTokens PromptCase::caption() const {
    validate();
    SceneSpec spec;
    spec.entries = entries;
    return caption_of(spec);
}

std::string PromptCase::slug() const {
    std::string s;
    for (std::size_t i = 0; i < entries.size(); ++i) {
        if (i) s += '_';
        s += std::to_string(entries[i].second) + "-" + class_name(entries[i].first);
    }
    return s;
}

int PromptCase::total() const {
    int t = 0;
    for (const auto& e : entries) t += e.second;
    return t;
}

std::vector<PromptCase> single_class_prompts() {
    std::vector<PromptCase> out;
    for (int n = 2; n <= 8; ++n) {
        out.push_back({{{static_cast<ObjectClass>((n - 2) % kNumClasses), n}}});
    }
    return out;
}

std::vector<PromptCase> two_class_prompts(int n) {
    static const std::vector<PromptCase> all = {
        {{{ObjectClass::Circle, 2}, {ObjectClass::Square, 3}}},
        {{{ObjectClass::Triangle, 1}, {ObjectClass::Ring, 4}}},
        {{{ObjectClass::Square, 1}, {ObjectClass::Triangle, 2}}},
        {{{ObjectClass::Ring, 2}, {ObjectClass::Circle, 3}}},
        {{{ObjectClass::Circle, 4}, {ObjectClass::Triangle, 3}}},
        {{{ObjectClass::Square, 2}, {ObjectClass::Ring, 1}}},
        {{{ObjectClass::Circle, 1}, {ObjectClass::Square, 4}}},
        {{{ObjectClass::Triangle, 4}, {ObjectClass::Ring, 3}}},
    };
    if (n < 1 || n > static_cast<int>(all.size())) {
        throw std::invalid_argument("two_class_prompts: n must lie in 1.." +
                                    std::to_string(all.size()));
    }
    return {all.begin(), all.begin() + n};
}

// ---- benchmark spec ----------------------------------------------------------

void BenchmarkSpec::validate() const {
    if (prompts.empty()) throw std::invalid_argument("benchmark needs at least one prompt");
    for (const auto& p : prompts) p.validate();
    if (seeds_per_prompt < 0) throw std::invalid_argument("seeds_per_prompt must be >= 0");
    if (arms.empty()) throw std::invalid_argument("benchmark needs at least one arm");
    for (std::size_t i = 0; i < arms.size(); ++i) {
        for (std::size_t j = i + 1; j < arms.size(); ++j) {
            if (arms[i] == arms[j]) throw std::invalid_argument("duplicate benchmark arm");
        }
    }
    const bool needs_two = std::any_of(arms.begin(), arms.end(), [](GuidanceArm a) {
        return a == GuidanceArm::AttentionOnly || a == GuidanceArm::Full;
    });
    if (needs_two) {
        for (const auto& p : prompts) {
            if (p.entries.size() < 2) {
                throw std::invalid_argument(
                    "attention and full arms need two-class prompts, got " + p.slug());
            }
        }
    }
    if (sampler.kind != SamplerKind::DDIM) {
        throw std::invalid_argument("benchmarks sample with the DDIM subsequence");
    }
    if (jobs < 1) throw std::invalid_argument("jobs must be >= 1");
    for (const auto& p : prompts) {
        for (const auto& [cls, n] : p.entries) {
            (void)cls;
            if (n + n_off < 1) {
                throw std::invalid_argument("count offset drives target below 1 for " + p.slug());
            }
        }
    }
}

std::string BenchmarkSpec::echo(const NoiseSchedule& ns) const {
    std::string s = "prompts=";
    for (std::size_t i = 0; i < prompts.size(); ++i) {
        if (i) s += ',';
        s += prompts[i].slug();
    }
    s += fmt(" seeds=%d seed=%llu arms=", seeds_per_prompt,
             static_cast<unsigned long long>(seed));
    for (std::size_t i = 0; i < arms.size(); ++i) {
        if (i) s += ',';
        s += arm_name(arms[i]);
    }
    s += fmt(" s_count=%.17g s_attention=%.17g s_max=%.17g", guidance.s_count,
             guidance.s_attention, guidance.s_max);
    s += " s_count_i=";
    if (guidance.s_count_i.empty()) {
        s += '-';
    } else {
        for (std::size_t i = 0; i < guidance.s_count_i.size(); ++i) {
            if (i) s += ';';
            s += fmt("%.17g", guidance.s_count_i[i]);
        }
    }
    s += fmt(" t_hi=%d t_lo=%d grad_cap=%.17g count_bias=%.17g n_off=%d steps=%d T=%d"
             " abar_T=%.17g",
             guidance.t_hi, guidance.t_lo, guidance.grad_cap, guidance.count_bias, n_off,
             sampler.steps, ns.T, ns.a_bar(ns.T));
    return s;
}

// ---- run records ---------------------------------------------------------------

std::string RunRecord::line(const BenchmarkSpec& spec) const {
    std::string s = fmt("arm=%s prompt=%s a=%d p=%d s=%d rng=%llu total=%d pc=",
                        arm_name(spec.arms[static_cast<std::size_t>(arm_idx)]),
                        spec.prompts[static_cast<std::size_t>(prompt_idx)].slug().c_str(),
                        arm_idx, prompt_idx, seed_idx, static_cast<unsigned long long>(rng_seed),
                        oracle_total);
    for (int c = 0; c < kNumClasses; ++c) {
        if (c) s += ',';
        s += std::to_string(oracle_per_class[static_cast<std::size_t>(c)]);
    }
    s += fmt(" iou=%.17g skips=%lld attempts=%lld part=%lld/%lld wall_ms=%lld", iou,
             static_cast<long long>(skips), static_cast<long long>(refine_attempts),
             static_cast<long long>(partition_ok), static_cast<long long>(partition_steps),
             static_cast<long long>(wall_ms));
    return s;
}

RunRecord RunRecord::parse(const std::string& text, const BenchmarkSpec& spec, int line_no) {
    FieldReader f(text, "results line " + std::to_string(line_no));
    RunRecord r;
    const std::string arm = f.take("arm");
    const std::string prompt = f.take("prompt");
    r.arm_idx = static_cast<int>(f.integer("a"));
    r.prompt_idx = static_cast<int>(f.integer("p"));
    r.seed_idx = static_cast<int>(f.integer("s"));
    r.rng_seed = f.uinteger("rng");
    r.oracle_total = static_cast<int>(f.integer("total"));
    const std::string pc = f.take("pc");
    r.iou = f.num("iou");
    r.skips = f.integer("skips");
    r.refine_attempts = f.integer("attempts");
    const std::string part = f.take("part");
    r.wall_ms = f.integer("wall_ms");
    f.done();

    if (r.arm_idx < 0 || r.arm_idx >= static_cast<int>(spec.arms.size()) || r.prompt_idx < 0 ||
        r.prompt_idx >= static_cast<int>(spec.prompts.size()) || r.seed_idx < 0 ||
        r.seed_idx >= spec.seeds_per_prompt) {
        throw std::runtime_error(f.where() + ": run index out of range for this benchmark");
    }
    if (arm != arm_name(spec.arms[static_cast<std::size_t>(r.arm_idx)]) ||
        prompt != spec.prompts[static_cast<std::size_t>(r.prompt_idx)].slug()) {
        throw std::runtime_error(f.where() + ": arm or prompt name disagrees with the spec");
    }
    const auto pcs = split_on(pc, ',');
    if (pcs.size() != kNumClasses) {
        throw std::runtime_error(f.where() + ": pc needs " + std::to_string(kNumClasses) +
                                 " comma-separated counts");
    }
    for (int c = 0; c < kNumClasses; ++c) {
        r.oracle_per_class[static_cast<std::size_t>(c)] =
            static_cast<int>(parse_int(pcs[static_cast<std::size_t>(c)], f.where()));
    }
    const auto parts = split_on(part, '/');
    if (parts.size() != 2) throw std::runtime_error(f.where() + ": part needs ok/steps");
    r.partition_ok = parse_int(parts[0], f.where());
    r.partition_steps = parse_int(parts[1], f.where());
    return r;
}

// ---- sampling dispatch ---------------------------------------------------------

namespace {

SampleResult sample_for(const BenchmarkSpec& spec, GuidanceArm arm, const PromptCase& prompt,
                        std::uint64_t rng_seed, const DenoiserParams& dn,
                        const CounterParams& ct, const NoiseSchedule& ns) {
    SamplerConfig sc = spec.sampler;
    sc.rng_seed = rng_seed;
    CaptionTokens cap = prompt.caption();
    GuidanceConfig g = spec.guidance;
    switch (arm) {
        case GuidanceArm::Unguided:
            g.s_count = 0.0;
            g.s_attention = 0.0;
            g.s_count_i.clear();
            break;
        case GuidanceArm::CountOnly:
            g.s_attention = 0.0;
            break;
        case GuidanceArm::AttentionOnly:
            g.s_count = 0.0;
            g.s_count_i.clear();
            break;
        case GuidanceArm::Full:
            break;
    }
    std::vector<CountTarget> targets;
    for (const auto& [cls, n] : prompt.entries) {
        (void)cls;
        targets.push_back({n, spec.n_off});
    }
    if (prompt.entries.size() == 1) {
        if (arm == GuidanceArm::Unguided) return unguided_sample(dn, ns, cap, sc);
        return counting_guided_sample(dn, ct, ns, cap, targets[0], g, sc);
    }
    return multi_object_guided_sample(dn, ct, ns, cap, targets, g, sc);
}

RunRecord score_run(const SampleResult& sr, int arm_idx, int prompt_idx, int seed_idx,
                    std::uint64_t rng_seed, std::int64_t wall_ms) {
    RunRecord r;
    r.arm_idx = arm_idx;
    r.prompt_idx = prompt_idx;
    r.seed_idx = seed_idx;
    r.rng_seed = rng_seed;
    r.wall_ms = wall_ms;
    OracleResult oc = oracle_count(sr.image);
    r.oracle_total = oc.total;
    r.oracle_per_class = oc.per_class;
    r.skips = sr.refinement_skips;
    double iou_sum = 0.0;
    std::int64_t iou_n = 0;
    for (const auto& rec : sr.trace) {
        r.refine_attempts += static_cast<std::int64_t>(rec.grad_rms.size());
        if (rec.has_attention) {
            iou_sum += rec.attention_iou;
            ++iou_n;
        }
        if (rec.has_partition) {
            ++r.partition_steps;
            if (rec.partition_ok) ++r.partition_ok;
        }
    }
    r.iou = iou_n ? iou_sum / static_cast<double>(iou_n)
                  : std::numeric_limits<double>::quiet_NaN();
    return r;
}

struct Task {
    int arm_idx, prompt_idx, seed_idx;
};

std::string run_key(int a, int p, int s) {
    return std::to_string(a) + ":" + std::to_string(p) + ":" + std::to_string(s);
}

std::string image_path(const std::string& out_dir, const BenchmarkSpec& spec, const Task& t) {
    return out_dir + "/images/" + arm_name(spec.arms[static_cast<std::size_t>(t.arm_idx)]) +
           "/" + spec.prompts[static_cast<std::size_t>(t.prompt_idx)].slug() + "_s" +
           fmt("%03d", t.seed_idx) + ".ppm";
}

std::string trace_path(const std::string& out_dir, const BenchmarkSpec& spec, const Task& t) {
    return out_dir + "/traces/" + arm_name(spec.arms[static_cast<std::size_t>(t.arm_idx)]) +
           "/" + spec.prompts[static_cast<std::size_t>(t.prompt_idx)].slug() + "_s" +
           fmt("%03d", t.seed_idx) + ".txt";
}

Metrics metrics_of(const BenchmarkSpec& spec, const std::vector<const RunRecord*>& runs) {
    Metrics m;
    m.images = static_cast<std::int64_t>(runs.size());
    if (runs.empty()) {
        m.iou = std::numeric_limits<double>::quiet_NaN();
        return m;
    }
    double iou_sum = 0.0;
    std::int64_t iou_n = 0, skips = 0, attempts = 0;
    for (const RunRecord* r : runs) {
        const PromptCase& p = spec.prompts[static_cast<std::size_t>(r->prompt_idx)];
        m.exact += r->oracle_total == p.total() ? 1.0 : 0.0;
        m.mae += std::abs(r->oracle_total - p.total());
        int hits = 0;
        std::array<bool, kNumClasses> prompted{};
        for (const auto& [cls, n] : p.entries) {
            prompted[static_cast<std::size_t>(cls)] = true;
            if (r->oracle_per_class[static_cast<std::size_t>(cls)] == n) ++hits;
        }
        m.class_exact += static_cast<double>(hits) / static_cast<double>(p.entries.size());
        bool joint = hits == static_cast<int>(p.entries.size());
        for (int c = 0; c < kNumClasses && joint; ++c) {
            if (!prompted[static_cast<std::size_t>(c)] &&
                r->oracle_per_class[static_cast<std::size_t>(c)] != 0) {
                joint = false;
            }
        }
        m.joint += joint ? 1.0 : 0.0;
        if (!std::isnan(r->iou)) {
            iou_sum += r->iou;
            ++iou_n;
        }
        skips += r->skips;
        attempts += r->refine_attempts;
        m.wall_ms += static_cast<double>(r->wall_ms);
    }
    const double n = static_cast<double>(runs.size());
    m.exact /= n;
    m.mae /= n;
    m.class_exact /= n;
    m.joint /= n;
    m.iou = iou_n ? iou_sum / static_cast<double>(iou_n)
                  : std::numeric_limits<double>::quiet_NaN();
    m.skip_rate = attempts ? static_cast<double>(skips) / static_cast<double>(attempts) : 0.0;
    m.wall_ms /= n;
    return m;
}

std::string metrics_line(const std::string& arm, const std::string& prompt, const Metrics& m) {
    return fmt("arm=%s prompt=%s images=%lld exact=%.6f mae=%.6f class_exact=%.6f joint=%.6f "
               "iou=%.6f skip_rate=%.6f",
               arm.c_str(), prompt.c_str(), static_cast<long long>(m.images), m.exact, m.mae,
               m.class_exact, m.joint, m.iou, m.skip_rate);
}

}  // namespace

std::vector<ArmMetrics> aggregate_runs(const BenchmarkSpec& spec,
                                       const std::vector<RunRecord>& runs) {
    spec.validate();
    const std::size_t na = spec.arms.size(), np = spec.prompts.size();
    const std::size_t ns = static_cast<std::size_t>(spec.seeds_per_prompt);
    std::vector<const RunRecord*> grid(na * np * ns, nullptr);
    for (const RunRecord& r : runs) {
        if (r.arm_idx < 0 || r.arm_idx >= static_cast<int>(na) || r.prompt_idx < 0 ||
            r.prompt_idx >= static_cast<int>(np) || r.seed_idx < 0 ||
            r.seed_idx >= static_cast<int>(ns)) {
            throw std::runtime_error("run record outside the benchmark grid");
        }
        const std::size_t at = (static_cast<std::size_t>(r.arm_idx) * np +
                                static_cast<std::size_t>(r.prompt_idx)) *
                                   ns +
                               static_cast<std::size_t>(r.seed_idx);
        if (grid[at]) throw std::runtime_error("duplicate run record for " +
                                               run_key(r.arm_idx, r.prompt_idx, r.seed_idx));
        grid[at] = &r;
    }
    for (std::size_t a = 0; a < na; ++a) {
        for (std::size_t p = 0; p < np; ++p) {
            for (std::size_t s = 0; s < ns; ++s) {
                if (!grid[(a * np + p) * ns + s]) {
                    throw std::runtime_error(
                        fmt("paired design violated: arm %s prompt %s missing seed %zu",
                            arm_name(spec.arms[a]), spec.prompts[p].slug().c_str(), s));
                }
            }
        }
    }

    std::vector<ArmMetrics> out;
    for (std::size_t a = 0; a < na; ++a) {
        ArmMetrics am;
        am.arm = spec.arms[a];
        std::vector<const RunRecord*> all;
        for (std::size_t p = 0; p < np; ++p) {
            std::vector<const RunRecord*> rows(grid.begin() + static_cast<std::ptrdiff_t>(
                                                                  (a * np + p) * ns),
                                               grid.begin() + static_cast<std::ptrdiff_t>(
                                                                  (a * np + p + 1) * ns));
            all.insert(all.end(), rows.begin(), rows.end());
            am.per_prompt.push_back(metrics_of(spec, rows));
        }
        am.overall = metrics_of(spec, all);
        out.push_back(std::move(am));
    }
    return out;
}

BenchmarkResult run_benchmark(const BenchmarkSpec& spec, const DenoiserParams& dn,
                              const CounterParams& ct, const NoiseSchedule& ns,
                              const std::string& out_dir) {
    spec.validate();
    spec.guidance.validate(ns.T);
    const std::string config_echo = spec.echo(ns);

    fs::create_directories(out_dir);
    const std::string config_path = out_dir + "/bench_config.txt";
    if (fs::exists(config_path)) {
        std::string stored = slurp(config_path);
        while (!stored.empty() && (stored.back() == '\n' || stored.back() == '\r')) {
            stored.pop_back();
        }
        if (stored != config_echo) {
            throw std::runtime_error(
                "benchmark directory holds results for a different configuration; "
                "stored: " + stored);
        }
    } else {
        atomic_write(config_path, config_echo + "\n");
    }
    for (const GuidanceArm a : spec.arms) {
        fs::create_directories(out_dir + "/images/" + arm_name(a));
        fs::create_directories(out_dir + "/traces/" + arm_name(a));
    }

    // the manifest: one line per finished run, re-read on startup
    const std::string results_path = out_dir + "/results.txt";
    std::vector<RunRecord> done;
    if (fs::exists(results_path)) {
        std::istringstream in(slurp(results_path));
        std::string line;
        int line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            if (line.empty()) continue;
            RunRecord r = RunRecord::parse(line, spec, line_no);
            const std::uint64_t want =
                derive_seed(spec.seed, "bench", static_cast<std::uint64_t>(r.prompt_idx),
                            static_cast<std::uint64_t>(r.seed_idx));
            if (r.rng_seed != want) {
                throw std::runtime_error("results line " + std::to_string(line_no) +
                                         ": stored rng seed disagrees with the derived one");
            }
            done.push_back(r);
        }
    }
    std::vector<bool> have(spec.arms.size() * spec.prompts.size() *
                               static_cast<std::size_t>(spec.seeds_per_prompt),
                           false);
    auto slot = [&](int a, int p, int s) {
        return (static_cast<std::size_t>(a) * spec.prompts.size() +
                static_cast<std::size_t>(p)) *
                   static_cast<std::size_t>(spec.seeds_per_prompt) +
               static_cast<std::size_t>(s);
    };
    for (const RunRecord& r : done) {
        if (have[slot(r.arm_idx, r.prompt_idx, r.seed_idx)]) {
            throw std::runtime_error("results.txt repeats run " +
                                     run_key(r.arm_idx, r.prompt_idx, r.seed_idx));
        }
        have[slot(r.arm_idx, r.prompt_idx, r.seed_idx)] = true;
    }

    std::vector<Task> todo;
    for (std::size_t a = 0; a < spec.arms.size(); ++a) {
        for (std::size_t p = 0; p < spec.prompts.size(); ++p) {
            for (int s = 0; s < spec.seeds_per_prompt; ++s) {
                if (!have[slot(static_cast<int>(a), static_cast<int>(p), s)]) {
                    todo.push_back({static_cast<int>(a), static_cast<int>(p), s});
                }
            }
        }
    }

    auto do_run = [&](const Task& t) {
        const std::uint64_t rng_seed =
            derive_seed(spec.seed, "bench", static_cast<std::uint64_t>(t.prompt_idx),
                        static_cast<std::uint64_t>(t.seed_idx));
        const auto started = std::chrono::steady_clock::now();
        SampleResult sr =
            sample_for(spec, spec.arms[static_cast<std::size_t>(t.arm_idx)],
                       spec.prompts[static_cast<std::size_t>(t.prompt_idx)], rng_seed, dn, ct,
                       ns);
        const auto wall_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                                 std::chrono::steady_clock::now() - started)
                                 .count();
        const std::string img = image_path(out_dir, spec, t);
        write_ppm(img + ".tmp", sr.image);
        fs::rename(img + ".tmp", img);
        std::string trace;
        for (const auto& rec : sr.trace) trace += rec.line() + "\n";
        atomic_write(trace_path(out_dir, spec, t), trace);
        return score_run(sr, t.arm_idx, t.prompt_idx, t.seed_idx, rng_seed, wall_ms);
    };

    if (!todo.empty()) {
        std::ofstream results(results_path, std::ios::app);
        if (!results) throw std::runtime_error("cannot append to " + results_path);
        auto flush_record = [&](const RunRecord& r) {
            results << r.line(spec) << '\n';
            results.flush();
            done.push_back(r);
        };

        if (spec.jobs == 1) {
            for (const Task& t : todo) flush_record(do_run(t));
        } else {
            std::vector<std::optional<RunRecord>> slots(todo.size());
            std::mutex mu;
            std::condition_variable cv;
            std::exception_ptr err;
            std::atomic<std::size_t> next{0};
            auto worker = [&] {
                for (;;) {
                    const std::size_t i = next.fetch_add(1);
                    if (i >= todo.size()) return;
                    try {
                        RunRecord r = do_run(todo[i]);
                        std::lock_guard<std::mutex> lk(mu);
                        slots[i] = r;
                    } catch (...) {
                        std::lock_guard<std::mutex> lk(mu);
                        if (!err) err = std::current_exception();
                        slots[i] = RunRecord{};
                    }
                    cv.notify_all();
                }
            };
            std::vector<std::thread> pool;
            const int n_workers = std::min<int>(spec.jobs, static_cast<int>(todo.size()));
            for (int w = 0; w < n_workers; ++w) pool.emplace_back(worker);
            {
                std::unique_lock<std::mutex> lk(mu);
                for (std::size_t i = 0; i < todo.size(); ++i) {
                    cv.wait(lk, [&] { return slots[i].has_value() || err; });
                    if (err) break;
                    flush_record(*slots[i]);
                }
            }
            for (auto& th : pool) th.join();
            if (err) std::rethrow_exception(err);
        }
    }

    BenchmarkResult res;
    res.runs = std::move(done);
    std::sort(res.runs.begin(), res.runs.end(), [](const RunRecord& x, const RunRecord& y) {
        return std::tie(x.arm_idx, x.prompt_idx, x.seed_idx) <
               std::tie(y.arm_idx, y.prompt_idx, y.seed_idx);
    });
    res.arms = aggregate_runs(spec, res.runs);

    std::string metrics = "# countgen metrics v1\n# spec " + config_echo + "\n# arms ";
    for (std::size_t a = 0; a < spec.arms.size(); ++a) {
        if (a) metrics += ',';
        metrics += arm_name(spec.arms[a]);
    }
    metrics += "\n# prompts ";
    for (std::size_t p = 0; p < spec.prompts.size(); ++p) {
        if (p) metrics += ',';
        metrics += spec.prompts[p].slug();
    }
    metrics += fmt("\n# seeds_per_prompt %d\n", spec.seeds_per_prompt);
    std::string timing = "# countgen timing v1, not stable across runs\n";
    for (std::size_t a = 0; a < spec.arms.size(); ++a) {
        const std::string arm = arm_name(spec.arms[a]);
        for (std::size_t p = 0; p < spec.prompts.size(); ++p) {
            metrics += metrics_line(arm, spec.prompts[p].slug(), res.arms[a].per_prompt[p]);
            metrics += '\n';
            timing += fmt("arm=%s prompt=%s wall_ms_per_image=%.3f\n", arm.c_str(),
                          spec.prompts[p].slug().c_str(), res.arms[a].per_prompt[p].wall_ms);
        }
        metrics += metrics_line(arm, "overall", res.arms[a].overall) + '\n';
        timing += fmt("arm=%s prompt=overall wall_ms_per_image=%.3f\n", arm.c_str(),
                      res.arms[a].overall.wall_ms);
    }
    atomic_write(out_dir + "/metrics.txt", metrics);
    atomic_write(out_dir + "/timing.txt", timing);
    return res;
}

// ---- report ------------------------------------------------------------------

MetricsFile parse_metrics_file(const std::string& path) {
    MetricsFile mf;
    mf.path = path;
    std::istringstream in(slurp(path));
    std::string line;
    int line_no = 0;
    const std::string where_base = path + " line ";
    while (std::getline(in, line)) {
        ++line_no;
        const std::string where = where_base + std::to_string(line_no);
        if (line.empty()) continue;
        if (line[0] == '#') {
            const auto toks = split_ws(line);
            if (toks.size() >= 3 && toks[1] == "arms") mf.arms = split_on(toks[2], ',');
            if (toks.size() >= 3 && toks[1] == "prompts") mf.prompts = split_on(toks[2], ',');
            if (toks.size() >= 3 && toks[1] == "seeds_per_prompt") {
                mf.seeds_per_prompt = static_cast<int>(parse_int(toks[2], where));
            }
            if (toks.size() >= 2 && toks[1] == "spec") {
                mf.spec_echo = line.substr(line.find("spec ") + 5);
            }
            continue;
        }
        if (mf.arms.empty() || mf.prompts.empty()) {
            throw std::runtime_error(where + ": record before the arms/prompts header");
        }
        FieldReader f(line, where);
        const std::string arm = f.take("arm");
        const std::string prompt = f.take("prompt");
        Metrics m;
        m.images = f.integer("images");
        m.exact = f.num("exact");
        m.mae = f.num("mae");
        m.class_exact = f.num("class_exact");
        m.joint = f.num("joint");
        m.iou = f.num("iou");
        m.skip_rate = f.num("skip_rate");
        f.done();
        const auto ai = std::find(mf.arms.begin(), mf.arms.end(), arm);
        if (ai == mf.arms.end()) throw std::runtime_error(where + ": unknown arm " + arm);
        const std::size_t a = static_cast<std::size_t>(ai - mf.arms.begin());
        std::size_t p;
        if (prompt == "overall") {
            p = mf.prompts.size();
        } else {
            const auto pi = std::find(mf.prompts.begin(), mf.prompts.end(), prompt);
            if (pi == mf.prompts.end()) {
                throw std::runtime_error(where + ": unknown prompt " + prompt);
            }
            p = static_cast<std::size_t>(pi - mf.prompts.begin());
        }
        mf.table.resize(mf.arms.size(),
                        std::vector<Metrics>(mf.prompts.size() + 1, Metrics{}));
        if (mf.table[a][p].images != 0) {
            throw std::runtime_error(where + ": duplicate row for " + arm + "/" + prompt);
        }
        mf.table[a][p] = m;
        if (m.images < 0 || m.exact < 0 || m.exact > 1 || m.joint < 0 || m.joint > 1 ||
            m.class_exact < 0 || m.class_exact > 1 || m.mae < 0 || m.skip_rate < 0 ||
            m.skip_rate > 1) {
            throw std::runtime_error(where + ": rate outside [0,1] or negative error");
        }
    }
    if (mf.arms.empty() || mf.table.empty()) {
        throw std::runtime_error(path + ": no metric records found");
    }
    for (std::size_t a = 0; a < mf.arms.size(); ++a) {
        for (std::size_t p = 0; p + 1 < mf.prompts.size() + 1; ++p) {
            if (mf.table[a][p].images == 0 && mf.table[a][mf.prompts.size()].images != 0) {
                throw std::runtime_error(path + ": missing row for " + mf.arms[a] + "/" +
                                         mf.prompts[p]);
            }
        }
    }
    return mf;
}

namespace {

void paste_tile(Array& sheet, std::int64_t H, std::int64_t W, const Tensor& img, int scale,
                std::int64_t y0, std::int64_t x0) {
    const std::int64_t h = img.dim(1), w = img.dim(2);
    const double* src = img.data();
    for (std::int64_t c = 0; c < 3; ++c) {
        for (std::int64_t y = 0; y < h * scale; ++y) {
            for (std::int64_t x = 0; x < w * scale; ++x) {
                sheet[(c * H + y0 + y) * W + x0 + x] =
                    src[(c * h + y / scale) * w + x / scale];
            }
        }
    }
}

}  // namespace

void emit_report(const ReportRequest& req) {
    if (req.metrics_files.empty()) {
        throw std::invalid_argument("report needs at least one metrics file");
    }
    if (req.out_dir.empty()) throw std::invalid_argument("report needs an output directory");
    if (req.sheet_scale < 1) throw std::invalid_argument("sheet scale must be >= 1");
    fs::create_directories(req.out_dir);

    std::string rep;
    for (std::size_t fi = 0; fi < req.metrics_files.size(); ++fi) {
        const MetricsFile mf = parse_metrics_file(req.metrics_files[fi]);
        rep += fmt("== %s (%zu prompts x %d seeds)\n", mf.path.c_str(), mf.prompts.size(),
                   mf.seeds_per_prompt);
        if (!mf.spec_echo.empty()) rep += "spec: " + mf.spec_echo + "\n";
        const auto ung = std::find(mf.arms.begin(), mf.arms.end(), "unguided");
        const bool has_ung = ung != mf.arms.end();
        const std::size_t ua = has_ung ? static_cast<std::size_t>(ung - mf.arms.begin()) : 0;
        for (std::size_t a = 0; a < mf.arms.size(); ++a) {
            const bool delta = has_ung && a != ua;
            rep += fmt("\narm %s\n", mf.arms[a].c_str());
            rep += fmt("%-22s %6s %8s %8s %8s %8s %8s %8s", "prompt", "images", "exact",
                       "mae", "class", "joint", "iou", "skips");
            if (delta) rep += fmt(" %9s", "d_exact");
            rep += '\n';
            for (std::size_t p = 0; p <= mf.prompts.size(); ++p) {
                const std::string label = p == mf.prompts.size() ? "overall" : mf.prompts[p];
                const Metrics& m = mf.table[a][p];
                rep += fmt("%-22s %6lld %8.4f %8.4f %8.4f %8.4f %8.4f %8.4f", label.c_str(),
                           static_cast<long long>(m.images), m.exact, m.mae, m.class_exact,
                           m.joint, m.iou, m.skip_rate);
                if (delta) rep += fmt(" %+9.4f", m.exact - mf.table[ua][p].exact);
                rep += '\n';
            }
        }
        rep += '\n';

        // contact sheets: one row per seed, one column per arm, nearest upscale
        const std::string base = fs::path(mf.path).parent_path().string();
        const int tile = kCanvas * req.sheet_scale, gut = 2;
        const std::int64_t H = gut + static_cast<std::int64_t>(mf.seeds_per_prompt) *
                                         (tile + gut);
        const std::int64_t W = gut + static_cast<std::int64_t>(mf.arms.size()) * (tile + gut);
        for (std::size_t p = 0; p < mf.prompts.size(); ++p) {
            if (mf.seeds_per_prompt == 0) continue;
            Array sheet = Array::Constant(3 * H * W, 1.0);
            for (std::size_t a = 0; a < mf.arms.size(); ++a) {
                for (int s = 0; s < mf.seeds_per_prompt; ++s) {
                    const std::string img = base + "/images/" + mf.arms[a] + "/" +
                                            mf.prompts[p] + "_s" + fmt("%03d", s) + ".ppm";
                    Tensor t = read_ppm(img);
                    if (t.dim(1) != kCanvas || t.dim(2) != kCanvas) {
                        throw std::runtime_error(img + ": unexpected image size");
                    }
                    paste_tile(sheet, H, W, t, req.sheet_scale,
                               gut + static_cast<std::int64_t>(s) * (tile + gut),
                               gut + static_cast<std::int64_t>(a) * (tile + gut));
                }
            }
            const std::string name =
                req.metrics_files.size() > 1
                    ? fmt("sheet_f%zu_%s.ppm", fi, mf.prompts[p].c_str())
                    : fmt("sheet_%s.ppm", mf.prompts[p].c_str());
            const std::string out = req.out_dir + "/" + name;
            write_ppm(out + ".tmp", Tensor::from_array({3, H, W}, std::move(sheet)));
            fs::rename(out + ".tmp", out);
        }
    }
    atomic_write(req.out_dir + "/report.txt", rep);
}

}  // namespace countgen
