#pragma once

#include "countgen/counter.hpp"
#include "countgen/denoiser.hpp"
#include "countgen/scenes.hpp"
#include "countgen/schedule.hpp"
#include "countgen/tensor.hpp"

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace countgen {

struct TrainConfig {
    int batch_size = 8;
    std::int64_t steps = 20000;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::uint64_t seed = 1;
    std::int64_t eval_interval = 500;

    void validate() const;
    // Canonical one-line key=value form; stored in checkpoints and compared on
    // resume so a run can never silently continue under different settings.
    std::string echo() const;
};

// Adaptive-moment optimizer. State rows follow the entries() order of the
// parameter struct they were first stepped with.
struct Adam {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::int64_t t = 0;
    std::vector<Array> m, v;

    static Adam from_config(const TrainConfig& cfg);
    void step(const std::vector<std::pair<std::string, Tensor*>>& entries, const Gradients& g);
};

// ---- checkpoint persistence -------------------------------------------------
// Binary layout, little-endian throughout: 8-byte magic "COUNTGEN", u32
// version, u64 step, u32+bytes config echo, u32 block count, then per block
// u32+bytes name, u32 rank, i64 dims, f64 values; final u64 FNV-1a of all
// preceding bytes.

struct CheckpointError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct CheckpointIoError : CheckpointError {
    using CheckpointError::CheckpointError;
};
struct CheckpointMagicError : CheckpointError {
    using CheckpointError::CheckpointError;
};
struct CheckpointVersionError : CheckpointError {
    using CheckpointError::CheckpointError;
};
struct CheckpointChecksumError : CheckpointError {
    using CheckpointError::CheckpointError;
};
struct CheckpointBlockError : CheckpointError {
    using CheckpointError::CheckpointError;
};

constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointBlock {
    std::string name;
    Shape shape;
    Array values;
};

struct Checkpoint {
    std::uint32_t version = kCheckpointVersion;
    std::uint64_t step = 0;
    std::string config_echo;
    std::vector<CheckpointBlock> blocks;
};

void save_checkpoint(const Checkpoint& ck, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// Typed wrappers: parameters plus optimizer state under opt_m/<name> and
// opt_v/<name>. The inference loaders ignore optimizer blocks; a missing
// parameter block is a CheckpointBlockError naming the block.
void save_denoiser_state(const std::string& path, DenoiserParams& params, const Adam& opt,
                         std::uint64_t step, const std::string& config_echo);
void save_counter_state(const std::string& path, CounterParams& params, const Adam& opt,
                        std::uint64_t step, const std::string& config_echo);

struct DenoiserState {
    DenoiserParams params;
    Adam opt;
    std::uint64_t step = 0;
    std::string config_echo;
};
struct CounterState {
    CounterParams params;
    Adam opt;
    std::uint64_t step = 0;
    std::string config_echo;
};

DenoiserState load_denoiser_state(const std::string& path);
CounterState load_counter_state(const std::string& path);
DenoiserParams load_denoiser(const std::string& path);
CounterParams load_counter(const std::string& path);

// ---- denoiser training -------------------------------------------------------

struct DdpmSample {
    int t = 0;
    Tensor eps;
    Tensor z;
};

// Uniform t in [1,T], fresh unit noise, closed-form forward diffusion.
DdpmSample make_ddpm_sample(const NoiseSchedule& ns, const Tensor& x0, Rng& rng);

// Mean squared error over all coordinates.
Tensor ddpm_item_loss(const Tensor& predicted_eps, const Tensor& true_eps);

double ddpm_train_step(DenoiserParams& params, Adam& opt, const NoiseSchedule& ns,
                       const std::vector<LabeledImage>& batch, Rng& rng, std::int64_t step_index);

// ---- counter training ---------------------------------------------------------

struct CountExample {
    Tensor image;
    int count = 0;  // 0 marks deliberately empty supplements
};

// Training stream for the counter: clean renders, renders under additive
// noise, composites masked to a random subset of the objects, and a slice of
// empty frames so blank inputs regress toward zero.
CountExample make_counter_example(std::uint64_t root_seed, std::int64_t index,
                                  const DatasetMix& mix = {});

// Relative squared error for labeled items; plain squared error for the
// zero-label supplements where the relative form is undefined.
Tensor counter_item_loss(const Tensor& predicted, int label);

double counter_train_step(CounterParams& params, Adam& opt,
                          const std::vector<CountExample>& batch, std::int64_t step_index);

// ---- drivers ------------------------------------------------------------------

struct TrainReport {
    std::vector<double> losses;   // losses of the steps run by this call
    std::int64_t steps_done = 0;  // total steps recorded in the checkpoint
};

// Runs (or resumes) training against the deterministic scene stream, saving
// the checkpoint every eval_interval steps and at the end, appending
// step/loss/wall lines to log_path. max_new_steps < 0 means run to
// cfg.steps. Resume requires the stored config echo to match cfg.
TrainReport train_denoiser(const TrainConfig& cfg, const NoiseSchedule& ns,
                           std::int64_t dataset_size, const DatasetMix& mix,
                           const std::string& ckpt_path, const std::string& log_path,
                           std::int64_t max_new_steps = -1);

TrainReport train_counter(const TrainConfig& cfg, std::int64_t dataset_size,
                          const std::string& ckpt_path, const std::string& log_path,
                          std::int64_t max_new_steps = -1);

struct TrainCurve {
    double first_mean = 0.0;  // mean loss over the first k steps
    double last_mean = 0.0;   // mean loss over the last k steps
    std::int64_t steps = 0;
};

// Reads a step/loss log back, deduplicating by step number (resumed runs may
// re-log a step that was trained but not yet checkpointed).
TrainCurve summarize_training_log(const std::string& path, std::int64_t k = 1000);

}  // namespace countgen
