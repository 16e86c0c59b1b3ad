#pragma once

#include <functional>
#include <optional>
#include <set>

#include "fptq/grad.hpp"
#include "fptq/transforms.hpp"

namespace fptq {

enum class LrSchedule : std::uint8_t { constant, cosine_warmup };

const char* lr_schedule_name(LrSchedule s);
LrSchedule lr_schedule_from_name(const std::string& name);

struct OptimizeConfig {
    double p = 4.0;
    int steps = 200;
    double lr = 0.05;
    LrSchedule schedule = LrSchedule::cosine_warmup;
    double warmup_frac = 0.1;
    std::uint64_t seed = 0;
    double fd_step = 1e-5;  // central-difference step when no analytic gradient
    int max_retries = 30;   // lr halvings per step before the step is skipped

    void validate() const;
};

// Learning rate at a given step: linear warmup over warmup_frac * steps,
// then (for cosine_warmup) a half cosine down to zero.
double schedule_lr(const OptimizeConfig& cfg, int step);

struct TrainTrace {
    std::vector<double> objective;      // value after each step; length == steps
    std::vector<double> final_params;
    int steps_taken = 0;
};

using GradFn = std::function<std::vector<double>(const std::vector<double>&)>;

// Plain gradient descent. A candidate step is accepted only if its
// objective is finite and not above the current one; otherwise the step
// size is halved and retried (bounded), so the recorded trace never
// increases. No momentum.
TrainTrace local_optimize(const ScalarFn& objective, const std::optional<GradFn>& analytic_grad,
                          const std::vector<double>& initial, const OptimizeConfig& cfg);

// --- local objectives -------------------------------------------------------

// sum over blocks of sum_{W in {w_q,w_k,w_v,w_u,w_g}} ||R^T W||_p
//                  + sum_{W in {w_o,w_d}}             ||W R||_p.
// Norm scales must be folded first.
double local_objective_rotation(const ModelParams& params, const ResidualRotation& t, double p);

// Same objective over the Cayley parametrization, with the analytic
// gradient used by the optimizer (finite differences over d*(d-1)/2 skew
// parameters would be prohibitive even at toy scale).
class RotationObjective {
public:
    RotationObjective(const ModelParams& params, double p);

    std::size_t param_count() const { return SkewParam::param_count(dim_); }
    double operator()(const std::vector<double>& skew_params) const;
    std::vector<double> gradient(const std::vector<double>& skew_params) const;

private:
    const ModelParams* params_;
    double p_;
    index_t dim_;
};

// ||w_q T_q||_p + ||w_k T_k||_p for one block, T_q the per-group repeat of
// the inverse-scale counterpart.
double local_objective_prerope(const Matrix& w_q, const Matrix& w_k,
                               const std::vector<PreRopeHeadTransform>& heads, index_t group_size,
                               double p);

// ||w_v diag(T_h)||_p + ||diag(T_h^-1 repeated) w_o||_p for one block,
// jointly over all kv heads (the two outer 1/p roots couple the heads).
double local_objective_value_block(const Matrix& w_v, const Matrix& w_o, const std::vector<Matrix>& heads,
                                   index_t group_size, double p);

// ||w_u diag(s)||_p + ||diag(s)^-1 w_d||_p for one block.
double local_objective_upscaler(const Matrix& w_u, const Matrix& w_d, const std::vector<double>& scales,
                                double p);

// --- end-to-end --------------------------------------------------------------

// Mean over rows of JSD(softmax(student) || softmax(teacher)), natural log.
// Bounded by ln 2; probabilities are floored at 1e-12 before the logs.
double jsd_loss(const Matrix& student_logits, const Matrix& teacher_logits);
double jsd_loss(const std::vector<Matrix>& student_logits, const std::vector<Matrix>& teacher_logits);

enum class TransformFamily : std::uint8_t { prerope, value, upscaler, rotation, hadamard, resscale };

const char* transform_family_name(TransformFamily f);
TransformFamily transform_family_from_name(const std::string& name);

enum class GradMode : std::uint8_t {
    finite_diff,       // central differences straight through the rounded model
    straight_through,  // differences on a clamp-only model: rounding acts as identity
                       // in the gradient, clipped values get zero gradient
};

const char* grad_mode_name(GradMode m);
GradMode grad_mode_from_name(const std::string& name);

// Difference stencil for the e2e gradient. Forward differences reuse one
// base evaluation per step and cost half as many forwards; with the coarse
// fd_step the extra O(h) bias is irrelevant next to the quantization noise.
enum class FdForm : std::uint8_t { forward, central };

const char* fd_form_name(FdForm f);
FdForm fd_form_from_name(const std::string& name);

struct E2EConfig {
    int steps = 256;
    index_t batch_size = 4;
    index_t seq_len = 64;
    int n_train_batches = 8;  // rotated round-robin across steps
    double lr = 0.1;
    LrSchedule schedule = LrSchedule::cosine_warmup;
    double warmup_frac = 0.1;
    // Probe distance for the loss differences. Deliberately coarse: the loss
    // is a staircase in the grid/transform parameters (every rounding
    // boundary crossing is a micro-jump), so the secant must straddle many
    // boundaries to see the trend instead of the jump noise.
    double fd_step = 0.1;
    FdForm fd_form = FdForm::forward;
    std::uint64_t data_seed = 99;
    GradMode grad_mode = GradMode::finite_diff;
    bool train_grids = true;
    // Transform families whose (identity-initialized) residual parameters
    // keep training end-to-end on top of the locally merged weights.
    // Defaults to prerope; the full parameter vector must stay small enough
    // for finite differences.
    std::set<TransformFamily> train_transforms = {TransformFamily::prerope};
    double divergence_factor = 10.0;

    void validate() const;
};

// The quantized student: locally merged weights plus online modes, the
// trainable grids, and identity-initialized transform deltas that e2e
// training moves. (Composing a delta on top of a merged family stays inside
// the family: scales multiply, angles add.)
struct Student {
    ModelParams params;
    bool residual_scaling = false;
    std::optional<BlockHadamardPlan> online_hadamard;
    QuantizerSet quantizers;
    std::optional<PreRopeTransform> delta_prerope;
    std::optional<UpScaler> delta_upscaler;

    // Weights with the current deltas merged in.
    ModelParams effective_params() const;
    ForwardOptions runtime_options(const QuantizerSet* q) const;
};

// Student-teacher training: minimizes the expected JSD between teacher
// (unquantized fp_params) and student logits over the trainable parameter
// vector (grid log-scales and clip factors, plus selected transform
// deltas). Teacher logits are computed once per batch and cached. Aborts
// with a diagnostic if the loss exceeds divergence_factor times the initial
// loss. Mutates student to the trained state.
TrainTrace e2e_train(const ModelParams& fp_params, Student& student, const std::vector<TokenBatch>& data,
                     const E2EConfig& cfg);

// Mean JSD of the student against the teacher on the given batches.
double evaluate_student_jsd(const ModelParams& fp_params, const Student& student,
                            const std::vector<TokenBatch>& batches);

}  // namespace fptq
