#include "countgen/eval.hpp"
#include "countgen/image_io.hpp"
#include "countgen/training.hpp"

#include "CLI11.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <stdexcept>
#include <string>
#include <vector>

using namespace countgen;

namespace {

// Misuse of the surface, distinct from failures inside the library: the
// former exits 1 with a hint, the latter exits 2.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

std::vector<int> parse_int_list(const std::string& s, const char* what) {
    std::vector<int> out;
    for (const std::string& tok : split_csv(s)) {
        try {
            std::size_t used = 0;
            out.push_back(std::stoi(tok, &used));
            if (used != tok.size()) throw std::invalid_argument(tok);
        } catch (const std::exception&) {
            throw UsageError(std::string(what) + ": '" + tok + "' is not an integer");
        }
    }
    return out;
}

// "three circles" or "two circles and three squares" -> prompt entries.
// Counts are words here and digits in --n; the caption vocabulary is the
// mapping between them.
std::vector<std::pair<ObjectClass, int>> parse_prompt(const std::string& text) {
    std::vector<std::string> words;
    {
        std::string cur;
        for (char c : text) {
            if (c == ' ' || c == '\t') {
                if (!cur.empty()) words.push_back(cur);
                cur.clear();
            } else {
                cur += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
            }
        }
        if (!cur.empty()) words.push_back(cur);
    }
    std::vector<std::pair<ObjectClass, int>> entries;
    std::size_t i = 0;
    while (i < words.size()) {
        if (!entries.empty()) {
            if (words[i] != "and") {
                throw UsageError("prompt: expected 'and' between object phrases, got '" +
                                 words[i] + "'");
            }
            ++i;
        }
        if (i + 1 >= words.size()) {
            throw UsageError("prompt: expected '<number word> <object noun>' phrases, e.g. "
                             "\"three circles\" or \"two circles and three squares\"");
        }
        const auto num = vocab::number_from_word(words[i]);
        if (!num) throw UsageError("prompt: '" + words[i] + "' is not a number word (one..twelve)");
        const auto cls = class_from_noun(words[i + 1]);
        if (!cls) {
            throw UsageError("prompt: '" + words[i + 1] +
                             "' is not an object noun (circle, square, triangle, ring)");
        }
        entries.push_back({*cls, *num});
        i += 2;
    }
    if (entries.empty()) throw UsageError("prompt: empty");
    if (entries.size() > 2) throw UsageError("prompt: captions hold at most two object phrases");
    if (entries.size() == 2 && entries[0].first == entries[1].first) {
        throw UsageError("prompt: the two object classes must differ");
    }
    return entries;
}

struct ScheduleFlags {
    int T = 1000;
    double beta_lo = 1e-4;
    double beta_hi = 0.02;

    void attach(CLI::App* sub) {
        sub->add_option("--T", T, "diffusion steps of the training schedule");
        sub->add_option("--beta-lo", beta_lo, "first-step noise variance");
        sub->add_option("--beta-hi", beta_hi, "last-step noise variance");
    }
};

struct GuidanceFlags {
    double s_count = 30.0;
    double s_attention = 10.0;
    double s_max = 0.1;
    std::string s_count_i;
    int t_hi = -1;
    int t_lo = 1;
    double grad_cap = 1.0;
    double count_bias = 0.0;

    void attach(CLI::App* sub) {
        sub->add_option("--s-count", s_count, "counting guidance scale");
        sub->add_option("--s-attention", s_attention, "attention separation scale");
        sub->add_option("--s-max", s_max, "coverage weight inside the attention loss");
        sub->add_option("--s-count-i", s_count_i,
                        "per-object counting scales, comma separated");
        sub->add_option("--t-hi", t_hi, "guidance window upper timestep (-1 = T)");
        sub->add_option("--t-lo", t_lo, "guidance window lower timestep");
        sub->add_option("--grad-cap", grad_cap, "RMS cap on guidance gradients");
        sub->add_option("--count-bias", count_bias,
                        "evaluation stub: constant added to the differentiable count");
    }

    GuidanceConfig build() const {
        GuidanceConfig g;
        g.s_count = s_count;
        g.s_attention = s_attention;
        g.s_max = s_max;
        if (!s_count_i.empty()) {
            for (const std::string& tok : split_csv(s_count_i)) {
                try {
                    std::size_t used = 0;
                    g.s_count_i.push_back(std::stod(tok, &used));
                    if (used != tok.size()) throw std::invalid_argument(tok);
                } catch (const std::exception&) {
                    throw UsageError("--s-count-i: '" + tok + "' is not a number");
                }
            }
        }
        g.t_hi = t_hi;
        g.t_lo = t_lo;
        g.grad_cap = grad_cap;
        g.count_bias = count_bias;
        return g;
    }
};

// Flat `key = value` config files: every key is a long flag of the invoked
// subcommand, applied only when that flag is absent from the command line.
std::vector<std::string> with_config_defaults(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    std::string path;
    for (std::size_t i = 0; i < args.size(); ++i) {
        if (args[i] == "--config" && i + 1 < args.size()) {
            path = args[i + 1];
        } else if (args[i].rfind("--config=", 0) == 0) {
            path = args[i].substr(9);
        }
    }
    if (path.empty()) return args;
    std::ifstream in(path);
    if (!in) throw UsageError("--config: cannot read " + path);
    auto trim = [](const std::string& s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return std::string();
        return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
    };
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        const auto eq = t.find('=');
        const std::string key = eq == std::string::npos ? "" : trim(t.substr(0, eq));
        if (key.empty()) {
            throw UsageError(path + " line " + std::to_string(line_no) +
                             ": expected key = value");
        }
        const std::string flag = "--" + key;
        bool on_cli = false;
        for (const std::string& a : args) {
            if (a == flag || a.rfind(flag + "=", 0) == 0) {
                on_cli = true;
                break;
            }
        }
        if (!on_cli) {
            args.push_back(flag);
            args.push_back(trim(t.substr(eq + 1)));
        }
    }
    return args;
}

void print_oracle(const Tensor& image) {
    OracleResult oc = oracle_count(image);
    std::string line = "oracle total=" + std::to_string(oc.total);
    for (int c = 0; c < kNumClasses; ++c) {
        line += std::string(" ") + class_name(static_cast<ObjectClass>(c)) + "=" +
                std::to_string(oc.per_class[static_cast<std::size_t>(c)]);
    }
    std::cout << line << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale text-conditioned diffusion with counting guidance"};
    app.require_subcommand(1);
    std::string config_path;

    // ---- gen-data ----
    auto* gen = app.add_subcommand("gen-data", "render a labeled synthetic scene corpus");
    gen->add_option("--config", config_path, "flat key = value defaults; flags win");
    struct {
        std::string out;
        int n = 0;
        std::uint64_t seed = 0;
        double two_class_prob = 0.4;
        int single_lo = 1, single_hi = 8, two_lo = 1, two_hi = 4;
    } gd;
    gen->add_option("--out", gd.out, "output directory")->required();
    gen->add_option("--n", gd.n, "number of images")->required()->check(CLI::PositiveNumber);
    gen->add_option("--seed", gd.seed, "root seed")->required();
    gen->add_option("--two-class-prob", gd.two_class_prob, "share of two-class scenes")
        ->check(CLI::Range(0.0, 1.0));
    gen->add_option("--single-lo", gd.single_lo, "single-class count lower bound");
    gen->add_option("--single-hi", gd.single_hi, "single-class count upper bound");
    gen->add_option("--two-lo", gd.two_lo, "two-class per-class count lower bound");
    gen->add_option("--two-hi", gd.two_hi, "two-class per-class count upper bound");
    gen->callback([&] {
        DatasetMix mix{gd.two_class_prob, {gd.single_lo, gd.single_hi}, {gd.two_lo, gd.two_hi}};
        dataset_emit(gd.n, gd.seed, gd.out, mix);
        std::cout << "wrote " << gd.n << " images and manifest.txt to " << gd.out << "\n";
    });

    // ---- train-denoiser / train-counter ----
    struct {
        std::string ckpt, log;
        TrainConfig cfg;
        std::int64_t dataset_size = 4096;
        double two_class_prob = 0.4;
        std::int64_t max_new_steps = -1;
        ScheduleFlags sched;
    } td;
    auto* tden = app.add_subcommand("train-denoiser", "train the noise predictor");
    tden->add_option("--config", config_path, "flat key = value defaults; flags win");
    tden->add_option("--ckpt", td.ckpt, "checkpoint path")->required();
    tden->add_option("--log", td.log, "step/loss log path")->required();
    tden->add_option("--seed", td.cfg.seed, "training seed")->required();
    tden->add_option("--steps", td.cfg.steps, "total optimization steps");
    tden->add_option("--batch", td.cfg.batch_size, "batch size");
    tden->add_option("--lr", td.cfg.lr, "learning rate");
    tden->add_option("--beta1", td.cfg.beta1, "first moment decay");
    tden->add_option("--beta2", td.cfg.beta2, "second moment decay");
    tden->add_option("--adam-eps", td.cfg.adam_eps, "optimizer epsilon");
    tden->add_option("--eval-interval", td.cfg.eval_interval, "steps between checkpoints");
    tden->add_option("--dataset-size", td.dataset_size, "distinct training scenes");
    tden->add_option("--two-class-prob", td.two_class_prob, "share of two-class scenes");
    tden->add_option("--max-new-steps", td.max_new_steps,
                     "stop after this many steps this run (-1 = to the end)");
    td.sched.attach(tden);
    tden->callback([&] {
        NoiseSchedule ns = make_schedule(td.sched.T, td.sched.beta_lo, td.sched.beta_hi);
        DatasetMix mix;
        mix.two_class_prob = td.two_class_prob;
        TrainReport rep = train_denoiser(td.cfg, ns, td.dataset_size, mix, td.ckpt, td.log,
                                         td.max_new_steps);
        std::cout << "denoiser at step " << rep.steps_done << " of " << td.cfg.steps << ", "
                  << rep.losses.size() << " steps this run";
        if (!rep.losses.empty()) std::cout << ", last loss " << rep.losses.back();
        std::cout << "\n";
    });

    struct {
        std::string ckpt, log;
        TrainConfig cfg;
        std::int64_t dataset_size = 4096;
        std::int64_t max_new_steps = -1;
    } tc;
    tc.cfg.steps = 8000;
    tc.cfg.batch_size = 16;
    auto* tcnt = app.add_subcommand("train-counter", "train the differentiable counter");
    tcnt->add_option("--config", config_path, "flat key = value defaults; flags win");
    tcnt->add_option("--ckpt", tc.ckpt, "checkpoint path")->required();
    tcnt->add_option("--log", tc.log, "step/loss log path")->required();
    tcnt->add_option("--seed", tc.cfg.seed, "training seed")->required();
    tcnt->add_option("--steps", tc.cfg.steps, "total optimization steps");
    tcnt->add_option("--batch", tc.cfg.batch_size, "batch size");
    tcnt->add_option("--lr", tc.cfg.lr, "learning rate");
    tcnt->add_option("--beta1", tc.cfg.beta1, "first moment decay");
    tcnt->add_option("--beta2", tc.cfg.beta2, "second moment decay");
    tcnt->add_option("--adam-eps", tc.cfg.adam_eps, "optimizer epsilon");
    tcnt->add_option("--eval-interval", tc.cfg.eval_interval, "steps between checkpoints");
    tcnt->add_option("--dataset-size", tc.dataset_size, "distinct base scenes");
    tcnt->add_option("--max-new-steps", tc.max_new_steps,
                     "stop after this many steps this run (-1 = to the end)");
    tcnt->callback([&] {
        TrainReport rep = train_counter(tc.cfg, tc.dataset_size, tc.ckpt, tc.log,
                                        tc.max_new_steps);
        std::cout << "counter at step " << rep.steps_done << " of " << tc.cfg.steps << ", "
                  << rep.losses.size() << " steps this run";
        if (!rep.losses.empty()) std::cout << ", last loss " << rep.losses.back();
        std::cout << "\n";
    });

    // ---- sample ----
    struct {
        std::string prompt, n, n_off = "0";
        std::uint64_t seed = 0;
        std::string denoiser, counter;
        std::string out = "sample.ppm", trace;
        int steps = 50;
        GuidanceFlags g;
        ScheduleFlags sched;
    } sm;
    auto* smp = app.add_subcommand("sample", "generate one image from a prompt");
    smp->add_option("--config", config_path, "flat key = value defaults; flags win");
    smp->add_option("--prompt", sm.prompt, "caption text, counts as number words")->required();
    smp->add_option("--n", sm.n, "count target per object phrase, digits, comma separated")
        ->required();
    smp->add_option("--n-off", sm.n_off, "count offsets, single value broadcasts");
    smp->add_option("--seed", sm.seed, "latent seed")->required();
    smp->add_option("--denoiser", sm.denoiser, "denoiser checkpoint")->required();
    smp->add_option("--counter", sm.counter, "counter checkpoint")->required();
    smp->add_option("--out", sm.out, "output image (P6 pixmap)");
    smp->add_option("--trace", sm.trace, "write per-step trace lines here instead of stdout");
    smp->add_option("--steps", sm.steps, "sampling steps");
    sm.g.attach(smp);
    sm.sched.attach(smp);
    smp->callback([&] {
        const auto entries = parse_prompt(sm.prompt);
        const std::vector<int> ns_list = parse_int_list(sm.n, "--n");
        if (ns_list.size() != entries.size()) {
            throw UsageError("--n gives " + std::to_string(ns_list.size()) +
                             " targets for " + std::to_string(entries.size()) +
                             " object phrases");
        }
        std::vector<int> offs = parse_int_list(sm.n_off, "--n-off");
        if (offs.size() == 1 && entries.size() > 1) offs.assign(entries.size(), offs[0]);
        if (offs.size() != entries.size()) {
            throw UsageError("--n-off gives " + std::to_string(offs.size()) +
                             " offsets for " + std::to_string(entries.size()) +
                             " object phrases");
        }
        std::vector<CountTarget> targets;
        for (std::size_t i = 0; i < entries.size(); ++i) {
            if (ns_list[i] < 1) {
                throw UsageError("count targets must be >= 1, got " +
                                 std::to_string(ns_list[i]));
            }
            if (ns_list[i] + offs[i] < 1) {
                throw UsageError("count target plus offset must stay >= 1, got " +
                                 std::to_string(ns_list[i] + offs[i]));
            }
            targets.push_back({ns_list[i], offs[i]});
        }

        DenoiserParams dn = load_denoiser(sm.denoiser);
        CounterParams ct = load_counter(sm.counter);
        NoiseSchedule ns = make_schedule(sm.sched.T, sm.sched.beta_lo, sm.sched.beta_hi);
        SamplerConfig sc{SamplerKind::DDIM, sm.steps, sm.seed};
        GuidanceConfig g = sm.g.build();

        PromptCase pc{entries};
        CaptionTokens cap = pc.caption();
        SampleResult res = entries.size() == 1
                               ? counting_guided_sample(dn, ct, ns, cap, targets[0], g, sc)
                               : multi_object_guided_sample(dn, ct, ns, cap, targets, g, sc);
        write_ppm(sm.out, res.image);
        std::string trace;
        for (const auto& rec : res.trace) trace += rec.line() + "\n";
        if (sm.trace.empty()) {
            std::cout << trace;
        } else {
            std::ofstream tf(sm.trace, std::ios::trunc);
            if (!tf) throw std::runtime_error("cannot write " + sm.trace);
            tf << trace;
        }
        std::cout << "caption: " << cap.text() << "\n";
        print_oracle(res.image);
        std::cout << "image written to " << sm.out;
        if (res.refinement_skips) {
            std::cout << " (" << res.refinement_skips << " skipped refinements)";
        }
        std::cout << "\n";
    });

    // ---- benchmark ----
    struct {
        std::string out, denoiser, counter;
        std::uint64_t seed = 0;
        std::string family = "single", arms;
        int seeds = 50;
        int max_prompts = -1;
        int steps = 50;
        int n_off = 0;
        int jobs = 1;
        GuidanceFlags g;
        ScheduleFlags sched;
    } bm;
    auto* bench = app.add_subcommand("benchmark", "paired-seed comparison of guidance arms");
    bench->add_option("--config", config_path, "flat key = value defaults; flags win");
    bench->add_option("--out", bm.out, "output directory")->required();
    bench->add_option("--denoiser", bm.denoiser, "denoiser checkpoint")->required();
    bench->add_option("--counter", bm.counter, "counter checkpoint")->required();
    bench->add_option("--seed", bm.seed, "root seed, shared across arms")->required();
    bench->add_option("--family", bm.family, "prompt family: single or two")
        ->check(CLI::IsMember({"single", "two"}));
    bench->add_option("--arms", bm.arms,
                      "comma-separated arms (unguided,count,attention,full); default by family");
    bench->add_option("--seeds", bm.seeds, "seeds per prompt")->check(CLI::NonNegativeNumber);
    bench->add_option("--max-prompts", bm.max_prompts, "truncate the prompt list (-1 = all)");
    bench->add_option("--steps", bm.steps, "sampling steps");
    bench->add_option("--n-off", bm.n_off, "count offset applied to every target");
    bench->add_option("--jobs", bm.jobs, "sampling worker threads")
        ->check(CLI::PositiveNumber);
    bm.g.attach(bench);
    bm.sched.attach(bench);
    bench->callback([&] {
        BenchmarkSpec spec;
        spec.prompts = bm.family == "single" ? single_class_prompts() : two_class_prompts(4);
        if (bm.max_prompts >= 1 && bm.max_prompts < static_cast<int>(spec.prompts.size())) {
            spec.prompts.resize(static_cast<std::size_t>(bm.max_prompts));
        }
        spec.seeds_per_prompt = bm.seeds;
        spec.seed = bm.seed;
        std::string arms = bm.arms;
        if (arms.empty()) {
            arms = bm.family == "single" ? "unguided,count" : "unguided,count,attention,full";
        }
        for (const std::string& a : split_csv(arms)) {
            try {
                spec.arms.push_back(arm_from_name(a));
            } catch (const std::invalid_argument& e) {
                throw UsageError(e.what());
            }
        }
        spec.guidance = bm.g.build();
        spec.sampler = SamplerConfig{SamplerKind::DDIM, bm.steps, 0};
        spec.n_off = bm.n_off;
        spec.jobs = bm.jobs;

        DenoiserParams dn = load_denoiser(bm.denoiser);
        CounterParams ct = load_counter(bm.counter);
        NoiseSchedule ns = make_schedule(bm.sched.T, bm.sched.beta_lo, bm.sched.beta_hi);
        BenchmarkResult res = run_benchmark(spec, dn, ct, ns, bm.out);
        for (std::size_t a = 0; a < spec.arms.size(); ++a) {
            const Metrics& m = res.arms[a].overall;
            std::printf("arm=%s images=%lld exact=%.4f mae=%.4f class_exact=%.4f joint=%.4f "
                        "iou=%.4f skip_rate=%.4f\n",
                        arm_name(spec.arms[a]), static_cast<long long>(m.images), m.exact,
                        m.mae, m.class_exact, m.joint, m.iou, m.skip_rate);
        }
        std::cout << "metrics written to " << bm.out << "/metrics.txt\n";
    });

    // ---- report ----
    struct {
        std::vector<std::string> metrics;
        std::string out;
        int scale = 4;
    } rp;
    auto* rep = app.add_subcommand("report", "tables and contact sheets from metrics files");
    rep->add_option("--config", config_path, "flat key = value defaults; flags win");
    rep->add_option("--metrics", rp.metrics, "metrics.txt paths (repeatable)")->required();
    rep->add_option("--out", rp.out, "output directory")->required();
    rep->add_option("--scale", rp.scale, "contact sheet upscale factor")
        ->check(CLI::PositiveNumber);
    rep->callback([&] {
        emit_report({rp.metrics, rp.out, rp.scale});
        std::cout << "report written to " << rp.out << "/report.txt\n";
    });

    try {
        std::vector<std::string> args = with_config_defaults(argc, argv);
        std::reverse(args.begin(), args.end());
        app.parse(args);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        app.exit(e);
        std::cerr << app.help();
        return 1;
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
