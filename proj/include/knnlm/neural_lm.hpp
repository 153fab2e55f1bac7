#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "knnlm/corpus.hpp"

namespace knnlm {

/// Which internal state of the network is used as the context representation.
enum class KeyTap : std::uint8_t {
    HiddenPreActivation = 0,
    HiddenPostActivation = 1,
    HiddenPostLayerNorm = 2,
    OutputLogitsInput = 3,
};

inline constexpr std::array<KeyTap, 4> kAllTaps = {
    KeyTap::HiddenPreActivation, KeyTap::HiddenPostActivation, KeyTap::HiddenPostLayerNorm,
    KeyTap::OutputLogitsInput};

std::string_view tap_name(KeyTap tap);
KeyTap parse_tap(std::string_view name);

struct LmConfig {
    std::size_t context_len = 3;
    std::size_t embed_dim = 32;
    std::size_t hidden_dim = 64;
    std::size_t vocab_size = 0;
    double dropout_rate = 0.0;
    bool use_layer_norm = true;
    std::uint64_t seed = 1;

    double learning_rate = 2e-3;
    std::size_t batch_size = 64;
    std::size_t epochs = 3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;

    void validate() const;
    WindowSpec window() const { return {context_len, kBosId}; }
};

/// Feedforward LM: embed -> concat -> affine -> ReLU -> [dropout] ->
/// [layer norm] -> affine -> softmax.
///
/// Parameter layout (row-major):
///   embedding  V x E
///   w_hidden   (n*E) x d,   b_hidden d
///   ln_gain d, ln_bias d    (present only with layer norm)
///   w_out      d x V,       b_out V
template <class Real>
class BasicFfLm {
public:
    struct Forward {
        std::array<std::vector<Real>, 4> taps;  // indexed by KeyTap; PostLayerNorm empty without LN
        std::vector<Real> probs;
    };

    BasicFfLm() = default;
    explicit BasicFfLm(const LmConfig& cfg);

    const LmConfig& config() const { return cfg_; }
    std::size_t dim() const { return cfg_.hidden_dim; }

    /// Single-context forward. Dropout is applied only with train_mode and a
    /// non-null rng.
    Forward forward(std::span<const TokenId> context, bool train_mode = false,
                    Rng* rng = nullptr) const;

    /// Inference-mode key for one context.
    std::vector<Real> extract_key(std::span<const TokenId> context, KeyTap tap) const;

    /// Inference-mode keys for many contexts (flattened n-wide), written row by
    /// row into out (rows x d). Skips the output layer.
    void extract_keys(std::span<const TokenId> contexts, KeyTap tap, std::span<Real> out) const;

    /// Inference-mode log p(target | context) for many contexts; also writes
    /// the tap's key rows when keys is non-empty.
    void score(std::span<const TokenId> contexts, std::span<const TokenId> targets, KeyTap tap,
               std::span<Real> keys, std::span<Real> logp) const;

    void check_tap(KeyTap tap) const;

    // Parameter access. tensors() lists every parameter tensor in file order.
    std::vector<std::span<Real>> tensors();
    std::vector<std::span<const Real>> tensors() const;
    std::size_t parameter_count() const;
    std::uint64_t hash() const;
    bool all_finite() const;

    std::vector<Real> embedding, w_hidden, b_hidden, ln_gain, ln_bias, w_out, b_out;

    template <class Other>
    BasicFfLm<Other> cast() const;

    void save(const std::string& path) const;
    static BasicFfLm load(const std::string& path);

private:
    LmConfig cfg_;
};

using FfLmModel = BasicFfLm<float>;
using FfLmModelF64 = BasicFfLm<double>;

/// Mean over a batch of -log p(target|context) and its gradient with respect
/// to every parameter. keep_mask, when non-empty, is the per-example dropout
/// mask (batch x d, values 0 or 1/(1-rate)).
template <class Real>
double loss_and_gradient(const BasicFfLm<Real>& model, std::span<const TokenId> contexts,
                         std::span<const TokenId> targets, std::span<const Real> keep_mask,
                         std::vector<std::vector<Real>>* grads);

struct TrainResult {
    std::vector<double> loss_curve;  // per-epoch mean training NLL
};

/// Adam on mean cross-entropy over shuffled windows of seq.
TrainResult train(FfLmModel& model, const TokenSequence& seq);

/// Mean inference-mode NLL in nats over every window of seq.
template <class Real>
double mean_nll(const BasicFfLm<Real>& model, const TokenSequence& seq);

/// Per-window inference-mode log-probabilities (corpus order).
template <class Real>
std::vector<Real> window_logprobs(const BasicFfLm<Real>& model, const TokenSequence& seq);

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t checked = 0;
};

/// Central finite differences over `params` randomly chosen parameters,
/// against the analytic gradient of the mean NLL of the sample windows.
/// Reports max |ga - gfd| / max(|ga| + |gfd|, 1e-8).
GradCheckResult grad_check(const FfLmModelF64& model, std::span<const TokenId> contexts,
                           std::span<const TokenId> targets, double epsilon,
                           std::size_t params = 256, std::uint64_t seed = 7);

}  // namespace knnlm
