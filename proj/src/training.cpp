#include "countgen/training.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <stdexcept>

namespace countgen {

void TrainConfig::validate() const {
    if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be positive");
    if (steps < 1) throw std::invalid_argument("TrainConfig: steps must be positive");
    if (!(lr > 0.0)) throw std::invalid_argument("TrainConfig: lr must be positive");
    if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0)) {
        throw std::invalid_argument("TrainConfig: betas must lie in (0,1)");
    }
    if (!(adam_eps > 0.0)) throw std::invalid_argument("TrainConfig: adam_eps must be positive");
    if (eval_interval < 1) throw std::invalid_argument("TrainConfig: eval_interval must be positive");
}

std::string TrainConfig::echo() const {
    char buf[256];
    std::snprintf(buf, sizeof buf,
                  "batch=%d steps=%lld lr=%.17g beta1=%.17g beta2=%.17g eps=%.17g seed=%llu eval=%lld",
                  batch_size, static_cast<long long>(steps), lr, beta1, beta2, adam_eps,
                  static_cast<unsigned long long>(seed), static_cast<long long>(eval_interval));
    return buf;
}

// ---- optimizer ----------------------------------------------------------------

Adam Adam::from_config(const TrainConfig& cfg) {
    Adam a;
    a.lr = cfg.lr;
    a.beta1 = cfg.beta1;
    a.beta2 = cfg.beta2;
    a.eps = cfg.adam_eps;
    return a;
}

void Adam::step(const std::vector<std::pair<std::string, Tensor*>>& entries, const Gradients& g) {
    if (m.empty()) {
        m.reserve(entries.size());
        v.reserve(entries.size());
        for (auto& e : entries) {
            m.push_back(Array::Zero(e.second->size()));
            v.push_back(Array::Zero(e.second->size()));
        }
    }
    if (m.size() != entries.size()) {
        throw std::invalid_argument("Adam: parameter listing changed size, state has " +
                                    std::to_string(m.size()) + " rows for " +
                                    std::to_string(entries.size()) + " tensors");
    }
    ++t;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < entries.size(); ++i) {
        Tensor& p = *entries[i].second;
        if (m[i].size() != p.size()) {
            throw std::invalid_argument("Adam: state row " + std::to_string(i) +
                                        " does not match tensor " + entries[i].first);
        }
        if (g.has(p)) {
            const Array& grad = g.at(p);
            m[i] = beta1 * m[i] + (1.0 - beta1) * grad;
            v[i] = beta2 * v[i] + (1.0 - beta2) * grad.square();
        } else {
            m[i] *= beta1;
            v[i] *= beta2;
        }
        p.values_mut() -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
    }
}

// ---- checkpoint format ---------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'C', 'O', 'U', 'N', 'T', 'G', 'E', 'N'};

std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 14695981039346656037ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

void put_raw(std::string& buf, const void* p, std::size_t n) {
    buf.append(static_cast<const char*>(p), n);
}
void put_u32(std::string& buf, std::uint32_t x) { put_raw(buf, &x, 4); }
void put_u64(std::string& buf, std::uint64_t x) { put_raw(buf, &x, 8); }
void put_i64(std::string& buf, std::int64_t x) { put_raw(buf, &x, 8); }
void put_f64(std::string& buf, double x) { put_raw(buf, &x, 8); }

struct Reader {
    const std::string& s;
    std::size_t pos = 0;

    void need(std::size_t n) {
        if (pos + n > s.size()) throw CheckpointIoError("checkpoint: malformed block structure");
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t x;
        std::memcpy(&x, s.data() + pos, 4);
        pos += 4;
        return x;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t x;
        std::memcpy(&x, s.data() + pos, 8);
        pos += 8;
        return x;
    }
    std::int64_t i64() {
        need(8);
        std::int64_t x;
        std::memcpy(&x, s.data() + pos, 8);
        pos += 8;
        return x;
    }
    double f64() {
        need(8);
        double x;
        std::memcpy(&x, s.data() + pos, 8);
        pos += 8;
        return x;
    }
    std::string bytes(std::size_t n) {
        need(n);
        std::string out = s.substr(pos, n);
        pos += n;
        return out;
    }
};

}  // namespace

void save_checkpoint(const Checkpoint& ck, const std::string& path) {
    std::string buf;
    put_raw(buf, kMagic, 8);
    put_u32(buf, ck.version);
    put_u64(buf, ck.step);
    put_u32(buf, static_cast<std::uint32_t>(ck.config_echo.size()));
    buf += ck.config_echo;
    put_u32(buf, static_cast<std::uint32_t>(ck.blocks.size()));
    for (const CheckpointBlock& b : ck.blocks) {
        if (numel(b.shape) != b.values.size()) {
            throw CheckpointIoError("checkpoint: block " + b.name + " has shape " +
                                    shape_str(b.shape) + " but " + std::to_string(b.values.size()) +
                                    " values");
        }
        put_u32(buf, static_cast<std::uint32_t>(b.name.size()));
        buf += b.name;
        put_u32(buf, static_cast<std::uint32_t>(b.shape.size()));
        for (std::int64_t d : b.shape) put_i64(buf, d);
        for (Eigen::Index i = 0; i < b.values.size(); ++i) put_f64(buf, b.values[i]);
    }
    put_u64(buf, fnv1a(buf));

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointIoError("checkpoint: cannot open " + path + " for writing");
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw CheckpointIoError("checkpoint: short write to " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointIoError("checkpoint: cannot open " + path);
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (buf.size() < 8) throw CheckpointChecksumError("checkpoint: file shorter than its header");
    if (std::memcmp(buf.data(), kMagic, 8) != 0) {
        throw CheckpointMagicError("checkpoint: unknown magic in " + path);
    }
    if (buf.size() < 16) throw CheckpointChecksumError("checkpoint: file shorter than its checksum");
    std::uint64_t stored;
    std::memcpy(&stored, buf.data() + buf.size() - 8, 8);
    std::string body = buf.substr(0, buf.size() - 8);
    if (fnv1a(body) != stored) {
        throw CheckpointChecksumError("checkpoint: checksum mismatch in " + path);
    }

    Reader r{body};
    r.pos = 8;
    Checkpoint ck;
    ck.version = r.u32();
    if (ck.version != kCheckpointVersion) {
        throw CheckpointVersionError("checkpoint: version " + std::to_string(ck.version) +
                                     " not supported, expected " +
                                     std::to_string(kCheckpointVersion));
    }
    ck.step = r.u64();
    ck.config_echo = r.bytes(r.u32());
    const std::uint32_t nblocks = r.u32();
    ck.blocks.reserve(nblocks);
    for (std::uint32_t i = 0; i < nblocks; ++i) {
        CheckpointBlock b;
        b.name = r.bytes(r.u32());
        const std::uint32_t rank = r.u32();
        for (std::uint32_t d = 0; d < rank; ++d) b.shape.push_back(r.i64());
        const std::int64_t n = numel(b.shape);
        if (n < 0 || n > (1 << 28)) throw CheckpointIoError("checkpoint: implausible block size");
        b.values.resize(n);
        for (std::int64_t k = 0; k < n; ++k) b.values[k] = r.f64();
        ck.blocks.push_back(std::move(b));
    }
    if (r.pos != body.size()) throw CheckpointIoError("checkpoint: trailing bytes after blocks");
    return ck;
}

// ---- typed wrappers ------------------------------------------------------------

namespace {

template <typename P>
Checkpoint pack_state(P& params, const Adam& opt, std::uint64_t step, const std::string& echo) {
    Checkpoint ck;
    ck.step = step;
    ck.config_echo = echo;
    auto entries = params.entries();
    for (auto& e : entries) {
        ck.blocks.push_back({e.first, e.second->shape(), e.second->values()});
    }
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const Tensor& p = *entries[i].second;
        const bool have = opt.m.size() == entries.size();
        ck.blocks.push_back({"opt_m/" + entries[i].first, p.shape(),
                             have ? opt.m[i] : Array(Array::Zero(p.size()))});
        ck.blocks.push_back({"opt_v/" + entries[i].first, p.shape(),
                             have ? opt.v[i] : Array(Array::Zero(p.size()))});
    }
    ck.blocks.push_back({"opt_t", Shape{1}, Array::Constant(1, static_cast<double>(opt.t))});
    return ck;
}

const CheckpointBlock* find_block(const Checkpoint& ck, const std::string& name) {
    for (const CheckpointBlock& b : ck.blocks) {
        if (b.name == name) return &b;
    }
    return nullptr;
}

const CheckpointBlock& need_block(const Checkpoint& ck, const std::string& name) {
    const CheckpointBlock* b = find_block(ck, name);
    if (!b) throw CheckpointBlockError("checkpoint: missing block " + name);
    return *b;
}

// `params` arrives freshly initialized and supplies the expected shapes.
template <typename P>
void fill_params(P& params, const Checkpoint& ck) {
    for (auto& e : params.entries()) {
        const CheckpointBlock& b = need_block(ck, e.first);
        if (b.shape != e.second->shape()) {
            throw CheckpointBlockError("checkpoint: block " + e.first + " has shape " +
                                       shape_str(b.shape) + ", expected " +
                                       shape_str(e.second->shape()));
        }
        *e.second = Tensor::from_array(b.shape, b.values, true);
    }
}

template <typename P>
void fill_opt(P& params, const Checkpoint& ck, Adam& opt) {
    auto entries = params.entries();
    opt.m.clear();
    opt.v.clear();
    for (auto& e : entries) {
        const CheckpointBlock& bm = need_block(ck, "opt_m/" + e.first);
        const CheckpointBlock& bv = need_block(ck, "opt_v/" + e.first);
        if (bm.values.size() != e.second->size() || bv.values.size() != e.second->size()) {
            throw CheckpointBlockError("checkpoint: optimizer state for " + e.first +
                                       " does not match the parameter size");
        }
        opt.m.push_back(bm.values);
        opt.v.push_back(bv.values);
    }
    opt.t = static_cast<std::int64_t>(need_block(ck, "opt_t").values[0]);
}

}  // namespace

void save_denoiser_state(const std::string& path, DenoiserParams& params, const Adam& opt,
                         std::uint64_t step, const std::string& config_echo) {
    save_checkpoint(pack_state(params, opt, step, config_echo), path);
}

void save_counter_state(const std::string& path, CounterParams& params, const Adam& opt,
                        std::uint64_t step, const std::string& config_echo) {
    save_checkpoint(pack_state(params, opt, step, config_echo), path);
}

DenoiserState load_denoiser_state(const std::string& path) {
    Checkpoint ck = load_checkpoint(path);
    DenoiserState st;
    st.params = init_denoiser(0);
    fill_params(st.params, ck);
    fill_opt(st.params, ck, st.opt);
    st.step = ck.step;
    st.config_echo = ck.config_echo;
    return st;
}

CounterState load_counter_state(const std::string& path) {
    Checkpoint ck = load_checkpoint(path);
    CounterState st;
    st.params = init_counter(0);
    fill_params(st.params, ck);
    fill_opt(st.params, ck, st.opt);
    st.step = ck.step;
    st.config_echo = ck.config_echo;
    return st;
}

DenoiserParams load_denoiser(const std::string& path) {
    Checkpoint ck = load_checkpoint(path);
    DenoiserParams p = init_denoiser(0);
    fill_params(p, ck);
    return p;
}

CounterParams load_counter(const std::string& path) {
    Checkpoint ck = load_checkpoint(path);
    CounterParams p = init_counter(0);
    fill_params(p, ck);
    return p;
}

// ---- denoiser training ----------------------------------------------------------

DdpmSample make_ddpm_sample(const NoiseSchedule& ns, const Tensor& x0, Rng& rng) {
    DdpmSample s;
    s.t = 1 + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(ns.T)));
    Array e(x0.size());
    for (Eigen::Index i = 0; i < e.size(); ++i) e[i] = rng.normal();
    s.eps = Tensor::from_array(x0.shape(), std::move(e));
    s.z = q_sample(ns, x0, s.t, s.eps);
    return s;
}

Tensor ddpm_item_loss(const Tensor& predicted_eps, const Tensor& true_eps) {
    return mean(pow(sub(predicted_eps, true_eps), 2.0));
}

double ddpm_train_step(DenoiserParams& params, Adam& opt, const NoiseSchedule& ns,
                       const std::vector<LabeledImage>& batch, Rng& rng, std::int64_t step_index) {
    if (batch.empty()) throw std::invalid_argument("ddpm_train_step: empty batch");
    Tape tape;
    Tensor acc;
    for (const LabeledImage& item : batch) {
        DdpmSample s = make_ddpm_sample(ns, item.image, rng);
        Tensor pred = denoise_forward(params, s.z, s.t, item.caption).first;
        Tensor l = ddpm_item_loss(pred, s.eps);
        acc = acc.defined() ? add(acc, l) : l;
    }
    Tensor loss = mul(acc, 1.0 / static_cast<double>(batch.size()));
    const double value = loss.item();
    if (!std::isfinite(value)) {
        throw std::runtime_error("ddpm_train_step: non-finite loss at step " +
                                 std::to_string(step_index));
    }
    Gradients g = tape.backward(loss);
    opt.step(params.entries(), g);
    return value;
}

// ---- counter training -------------------------------------------------------------

CountExample make_counter_example(std::uint64_t root_seed, std::int64_t index,
                                  const DatasetMix& mix) {
    Rng flavor(derive_seed(root_seed, "flavor", static_cast<std::uint64_t>(index)));
    const double u = flavor.uniform();
    if (u < 0.10) {
        // empty frames teach the head that nothing means zero
        Rng rng(derive_seed(root_seed, "blank", static_cast<std::uint64_t>(index)));
        const double base = rng.uniform() < 0.5 ? kBackground : 0.0;
        const double sigma = rng.uniform(0.0, 0.3);
        Array a = Array::Constant(3 * kCanvas * kCanvas, base);
        for (Eigen::Index i = 0; i < a.size(); ++i) a[i] += sigma * rng.normal();
        return {Tensor::from_array({3, kCanvas, kCanvas}, std::move(a)), 0};
    }

    LabeledImage item =
        sample_dataset_item(derive_seed(root_seed, "scene-root"), index, mix);
    const int total = item.spec.total_count();
    if (u < 0.50) return {item.image, total};

    if (u < 0.85) {
        Rng rng(derive_seed(root_seed, "noise", static_cast<std::uint64_t>(index)));
        const double sigma = rng.uniform(0.0, 0.5);
        Array a = item.image.values();
        for (Eigen::Index i = 0; i < a.size(); ++i) a[i] += sigma * rng.normal();
        return {Tensor::from_array(item.image.shape(), std::move(a)), total};
    }

    // keep a random nonempty subset of objects visible; the rest of the frame
    // goes black, matching how masked counting composites look at sampling time
    Rng rng(derive_seed(root_seed, "mask", static_cast<std::uint64_t>(index)));
    const auto& placements = item.spec.placements;
    const int keep = 1 + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(total)));
    std::vector<int> order(placements.size());
    std::iota(order.begin(), order.end(), 0);
    for (int i = 0; i < keep; ++i) {
        const int j = i + static_cast<int>(rng.uniform_int(order.size() - static_cast<std::size_t>(i)));
        std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
    }
    Array mask = Array::Zero(kCanvas * kCanvas);
    for (int i = 0; i < keep; ++i) {
        const Placement& p = placements[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
        // bound+1 discs cover their object fully and, by the strict placement
        // separation, never touch a dropped object's pixels
        const int r = object_bound_radius(p) + 1;
        for (int dy = -r; dy <= r; ++dy) {
            for (int dx = -r; dx <= r; ++dx) {
                if (dx * dx + dy * dy > r * r) continue;
                const int y = p.cy + dy, x = p.cx + dx;
                if (y < 0 || y >= kCanvas || x < 0 || x >= kCanvas) continue;
                mask[y * kCanvas + x] = 1.0;
            }
        }
    }
    Tensor m = Tensor::from_array({kCanvas, kCanvas}, std::move(mask));
    return {mask_mul(item.image, m), keep};
}

Tensor counter_item_loss(const Tensor& predicted, int label) {
    if (label < 0) throw std::invalid_argument("counter_item_loss: negative label");
    if (label == 0) return pow(predicted, 2.0);
    return relative_count_loss(predicted, static_cast<double>(label));
}

double counter_train_step(CounterParams& params, Adam& opt,
                          const std::vector<CountExample>& batch, std::int64_t step_index) {
    if (batch.empty()) throw std::invalid_argument("counter_train_step: empty batch");
    Tape tape;
    Tensor acc;
    for (const CountExample& item : batch) {
        Tensor l = counter_item_loss(count_forward(params, item.image), item.count);
        acc = acc.defined() ? add(acc, l) : l;
    }
    Tensor loss = mul(acc, 1.0 / static_cast<double>(batch.size()));
    const double value = loss.item();
    if (!std::isfinite(value)) {
        throw std::runtime_error("counter_train_step: non-finite loss at step " +
                                 std::to_string(step_index));
    }
    Gradients g = tape.backward(loss);
    opt.step(params.entries(), g);
    return value;
}

// ---- drivers -------------------------------------------------------------------

namespace {

struct StepLog {
    std::ofstream out;
    std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();

    explicit StepLog(const std::string& path) : out(path, std::ios::app) {
        if (!out) throw std::runtime_error("training: cannot open log " + path);
    }
    void line(std::int64_t step, double loss) {
        const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                            std::chrono::steady_clock::now() - t0)
                            .count();
        char buf[160];
        std::snprintf(buf, sizeof buf, "step=%lld loss=%.17g wall_ms=%lld\n",
                      static_cast<long long>(step), loss, static_cast<long long>(ms));
        out << buf;
        out.flush();
    }
};

}  // namespace

TrainReport train_denoiser(const TrainConfig& cfg, const NoiseSchedule& ns,
                           std::int64_t dataset_size, const DatasetMix& mix,
                           const std::string& ckpt_path, const std::string& log_path,
                           std::int64_t max_new_steps) {
    cfg.validate();
    if (dataset_size < 1) throw std::invalid_argument("train_denoiser: dataset_size must be positive");

    DenoiserParams params;
    Adam opt = Adam::from_config(cfg);
    std::int64_t step = 0;
    if (std::filesystem::exists(ckpt_path)) {
        DenoiserState st = load_denoiser_state(ckpt_path);
        if (st.config_echo != cfg.echo()) {
            throw std::runtime_error("train_denoiser: checkpoint config '" + st.config_echo +
                                     "' does not match '" + cfg.echo() + "'");
        }
        params = std::move(st.params);
        opt.m = std::move(st.opt.m);
        opt.v = std::move(st.opt.v);
        opt.t = st.opt.t;
        step = static_cast<std::int64_t>(st.step);
    } else {
        params = init_denoiser(cfg.seed);
    }

    const std::uint64_t scene_root = derive_seed(cfg.seed, "scenes");
    StepLog log(log_path);
    TrainReport rep;
    std::int64_t fresh = 0;
    while (step < cfg.steps && (max_new_steps < 0 || fresh < max_new_steps)) {
        Rng data_rng(derive_seed(cfg.seed, "data", static_cast<std::uint64_t>(step)));
        std::vector<LabeledImage> batch;
        batch.reserve(static_cast<std::size_t>(cfg.batch_size));
        for (int j = 0; j < cfg.batch_size; ++j) {
            const std::int64_t idx =
                static_cast<std::int64_t>(data_rng.uniform_int(static_cast<std::uint64_t>(dataset_size)));
            batch.push_back(sample_dataset_item(scene_root, idx, mix));
        }
        Rng noise_rng(derive_seed(cfg.seed, "noise", static_cast<std::uint64_t>(step)));
        const double loss = ddpm_train_step(params, opt, ns, batch, noise_rng, step);
        ++step;
        ++fresh;
        rep.losses.push_back(loss);
        log.line(step, loss);
        if (step % cfg.eval_interval == 0 || step == cfg.steps) {
            save_denoiser_state(ckpt_path, params, opt, static_cast<std::uint64_t>(step), cfg.echo());
        }
    }
    if (fresh > 0) {
        save_denoiser_state(ckpt_path, params, opt, static_cast<std::uint64_t>(step), cfg.echo());
    }
    rep.steps_done = step;
    return rep;
}

TrainReport train_counter(const TrainConfig& cfg, std::int64_t dataset_size,
                          const std::string& ckpt_path, const std::string& log_path,
                          std::int64_t max_new_steps) {
    cfg.validate();
    if (dataset_size < 1) throw std::invalid_argument("train_counter: dataset_size must be positive");

    CounterParams params;
    Adam opt = Adam::from_config(cfg);
    std::int64_t step = 0;
    if (std::filesystem::exists(ckpt_path)) {
        CounterState st = load_counter_state(ckpt_path);
        if (st.config_echo != cfg.echo()) {
            throw std::runtime_error("train_counter: checkpoint config '" + st.config_echo +
                                     "' does not match '" + cfg.echo() + "'");
        }
        params = std::move(st.params);
        opt.m = std::move(st.opt.m);
        opt.v = std::move(st.opt.v);
        opt.t = st.opt.t;
        step = static_cast<std::int64_t>(st.step);
    } else {
        params = init_counter(cfg.seed);
    }

    const std::uint64_t example_root = derive_seed(cfg.seed, "counter-data");
    StepLog log(log_path);
    TrainReport rep;
    std::int64_t fresh = 0;
    while (step < cfg.steps && (max_new_steps < 0 || fresh < max_new_steps)) {
        Rng data_rng(derive_seed(cfg.seed, "data", static_cast<std::uint64_t>(step)));
        std::vector<CountExample> batch;
        batch.reserve(static_cast<std::size_t>(cfg.batch_size));
        for (int j = 0; j < cfg.batch_size; ++j) {
            const std::int64_t idx =
                static_cast<std::int64_t>(data_rng.uniform_int(static_cast<std::uint64_t>(dataset_size)));
            batch.push_back(make_counter_example(example_root, idx));
        }
        const double loss = counter_train_step(params, opt, batch, step);
        ++step;
        ++fresh;
        rep.losses.push_back(loss);
        log.line(step, loss);
        if (step % cfg.eval_interval == 0 || step == cfg.steps) {
            save_counter_state(ckpt_path, params, opt, static_cast<std::uint64_t>(step), cfg.echo());
        }
    }
    if (fresh > 0) {
        save_counter_state(ckpt_path, params, opt, static_cast<std::uint64_t>(step), cfg.echo());
    }
    rep.steps_done = step;
    return rep;
}

TrainCurve summarize_training_log(const std::string& path, std::int64_t k) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("summarize_training_log: cannot open " + path);
    std::map<std::int64_t, double> by_step;
    std::string line;
    while (std::getline(in, line)) {
        long long step = 0;
        double loss = 0.0;
        if (std::sscanf(line.c_str(), "step=%lld loss=%lf", &step, &loss) == 2) {
            by_step[step] = loss;
        }
    }
    TrainCurve c;
    c.steps = static_cast<std::int64_t>(by_step.size());
    if (c.steps == 0) return c;
    const std::int64_t span = std::min(k, c.steps);
    std::vector<double> ordered;
    ordered.reserve(by_step.size());
    for (auto& [s, l] : by_step) ordered.push_back(l);
    for (std::int64_t i = 0; i < span; ++i) {
        c.first_mean += ordered[static_cast<std::size_t>(i)];
        c.last_mean += ordered[ordered.size() - 1 - static_cast<std::size_t>(i)];
    }
    c.first_mean /= static_cast<double>(span);
    c.last_mean /= static_cast<double>(span);
    return c;
}

}  // namespace countgen
