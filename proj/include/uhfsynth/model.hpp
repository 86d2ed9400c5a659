#pragma once

// Full encoder-decoder assembly: 3x3 input conv, three encoder levels with
// pixel-unshuffle downsampling, a deep channel-attention bottleneck plus one
// spatial-attention block, a mirrored decoder with concat skips fused by 1x1
// convs, and a tanh output head.

#include <string>
#include <vector>

#include "uhfsynth/blocks.hpp"

namespace uhfsynth {

struct ModelConfig {
    int64_t in_channels = 1;
    int64_t out_channels = 1;
    int64_t base_channels = 48;
    std::vector<int64_t> level_channels = {48, 96, 192};
    std::vector<int64_t> encoder_blocks = {1, 2, 2};
    // Free depth knob: 16 channel-attention blocks at the bottleneck put the
    // default model at 10,727,539 parameters, the grid value closest to the
    // 10.5M design budget.
    int64_t bottleneck_channel_blocks = 16;
    int64_t bottleneck_spatial_blocks = 1;
    std::vector<int64_t> decoder_blocks = {2, 2, 1}; // deepest level first
    std::vector<int64_t> heads = {1, 2, 4};
    int64_t bottleneck_heads = 4;
    real gdfn_expansion = 2.66;
    Activation output_activation = Activation::Tanh;

    static constexpr int levels = 3;

    /// Scale the channel ladder from a different base width (toy configs).
    static ModelConfig with_base(int64_t base) {
        ModelConfig c;
        c.base_channels = base;
        c.level_channels = {base, 2 * base, 4 * base};
        return c;
    }

    /// Spatial dims must be divisible by this (one halving per downsample).
    int64_t spatial_divisor() const { return 1 << (levels - 1); }

    void validate() const {
        check(in_channels >= 1 && out_channels >= 1, "ModelConfig: channels must be >= 1");
        check(static_cast<int>(level_channels.size()) == levels &&
                  static_cast<int>(encoder_blocks.size()) == levels &&
                  static_cast<int>(decoder_blocks.size()) == levels &&
                  static_cast<int>(heads.size()) == levels,
              "ModelConfig: level_channels/encoder_blocks/decoder_blocks/heads must each list ",
              levels, " levels");
        check(level_channels[0] == base_channels, "ModelConfig: level_channels[0] (",
              level_channels[0], ") != base_channels (", base_channels, ")");
        for (int i = 0; i + 1 < levels; ++i)
            check(level_channels[static_cast<size_t>(i + 1)] ==
                      2 * level_channels[static_cast<size_t>(i)],
                  "ModelConfig: level_channels must double per level, got ",
                  level_channels[static_cast<size_t>(i)], " -> ",
                  level_channels[static_cast<size_t>(i + 1)]);
        for (int i = 0; i < levels; ++i) {
            check(level_channels[static_cast<size_t>(i)] % 2 == 0,
                  "ModelConfig: level widths must be even, got ",
                  level_channels[static_cast<size_t>(i)]);
            check(heads[static_cast<size_t>(i)] >= 1 &&
                      level_channels[static_cast<size_t>(i)] % heads[static_cast<size_t>(i)] == 0,
                  "ModelConfig: level ", i, " width ", level_channels[static_cast<size_t>(i)],
                  " not divisible by heads ", heads[static_cast<size_t>(i)]);
            check(encoder_blocks[static_cast<size_t>(i)] >= 0 &&
                      decoder_blocks[static_cast<size_t>(i)] >= 0,
                  "ModelConfig: block counts must be >= 0");
        }
        check(bottleneck_channel_blocks >= 0 && bottleneck_spatial_blocks >= 0,
              "ModelConfig: bottleneck block counts must be >= 0");
        check(bottleneck_heads >= 1 && level_channels.back() % bottleneck_heads == 0,
              "ModelConfig: bottleneck width ", level_channels.back(),
              " not divisible by bottleneck_heads ", bottleneck_heads);
        check(gdfn_expansion > 0, "ModelConfig: gdfn_expansion must be > 0");
    }

    bool operator==(const ModelConfig& o) const {
        return in_channels == o.in_channels && out_channels == o.out_channels &&
               base_channels == o.base_channels && level_channels == o.level_channels &&
               encoder_blocks == o.encoder_blocks &&
               bottleneck_channel_blocks == o.bottleneck_channel_blocks &&
               bottleneck_spatial_blocks == o.bottleneck_spatial_blocks &&
               decoder_blocks == o.decoder_blocks && heads == o.heads &&
               bottleneck_heads == o.bottleneck_heads && gdfn_expansion == o.gdfn_expansion &&
               output_activation == o.output_activation;
    }
    bool operator!=(const ModelConfig& o) const { return !(*this == o); }
};

struct ModelParams {
    ModelConfig config;
    Tensor conv_in; // [C0, in, 3, 3], no bias
    std::vector<std::vector<RestormerBlockParams>> enc; // per level
    std::vector<ResampleParams> downs;                  // levels-1 entries
    std::vector<RestormerBlockParams> mid;              // bottleneck channel blocks
    std::vector<SpatialAttnParams> mid_spatial;
    std::vector<std::vector<RestormerBlockParams>> dec; // deepest level first
    std::vector<ResampleParams> ups;                    // levels-1 entries
    std::vector<Tensor> fuse;                           // 1x1 skip fusions, [C, 2C, 1, 1]
    Tensor conv_out_w; // [out, C0, 3, 3]
    Tensor conv_out_b; // [out], the only biased conv in the network

    /// Stable construction-order traversal of every learnable tensor.
    template <class F> void for_each_param(F&& fn) {
        fn(std::string("conv_in"), conv_in);
        for (size_t l = 0; l < enc.size(); ++l) {
            for (size_t b = 0; b < enc[l].size(); ++b)
                enc[l][b].for_each_param("enc" + std::to_string(l) + ".b" + std::to_string(b), fn);
            if (l < downs.size())
                downs[l].for_each_param("down" + std::to_string(l), fn);
        }
        for (size_t b = 0; b < mid.size(); ++b)
            mid[b].for_each_param("mid.b" + std::to_string(b), fn);
        for (size_t s = 0; s < mid_spatial.size(); ++s)
            mid_spatial[s].for_each_param("mid.spatial" + std::to_string(s), fn);
        for (size_t l = 0; l < dec.size(); ++l) {
            for (size_t b = 0; b < dec[l].size(); ++b)
                dec[l][b].for_each_param("dec" + std::to_string(l) + ".b" + std::to_string(b), fn);
            if (l < ups.size()) {
                ups[l].for_each_param("up" + std::to_string(l), fn);
                fn("fuse" + std::to_string(l), fuse[l]);
            }
        }
        fn(std::string("conv_out.w"), conv_out_w);
        fn(std::string("conv_out.b"), conv_out_b);
    }

    int64_t total_params() {
        int64_t n = 0;
        for_each_param([&](const std::string&, Tensor& t) { n += t.numel(); });
        return n;
    }

    void set_requires_grad(bool on) {
        for_each_param([on](const std::string&, Tensor& t) { t.set_requires_grad(on); });
    }

    void zero_grads() {
        for_each_param([](const std::string&, Tensor& t) { t.zero_grad(); });
    }
};

inline ModelParams build(const ModelConfig& config, uint64_t seed) {
    config.validate();
    Rng rng(seed);
    ModelParams p;
    p.config = config;
    const auto& ch = config.level_channels;

    p.conv_in = kaiming_conv_weight(ch[0], config.in_channels, 3, rng);

    p.enc.resize(static_cast<size_t>(ModelConfig::levels));
    for (int l = 0; l < ModelConfig::levels; ++l) {
        for (int64_t b = 0; b < config.encoder_blocks[static_cast<size_t>(l)]; ++b)
            p.enc[static_cast<size_t>(l)].push_back(
                init_restormer_block(ch[static_cast<size_t>(l)],
                                     config.heads[static_cast<size_t>(l)],
                                     config.gdfn_expansion, rng));
        if (l + 1 < ModelConfig::levels)
            p.downs.push_back(init_downsample(ch[static_cast<size_t>(l)], rng));
    }

    for (int64_t b = 0; b < config.bottleneck_channel_blocks; ++b)
        p.mid.push_back(init_restormer_block(ch.back(), config.bottleneck_heads,
                                             config.gdfn_expansion, rng));
    for (int64_t s = 0; s < config.bottleneck_spatial_blocks; ++s)
        p.mid_spatial.push_back(init_spatial_attn(ch.back(), config.bottleneck_heads, rng));

    p.dec.resize(static_cast<size_t>(ModelConfig::levels));
    for (int l = 0; l < ModelConfig::levels; ++l) {
        // dec level l runs at ch[levels-1-l]
        const int64_t c = ch[static_cast<size_t>(ModelConfig::levels - 1 - l)];
        const int64_t h = config.heads[static_cast<size_t>(ModelConfig::levels - 1 - l)];
        for (int64_t b = 0; b < config.decoder_blocks[static_cast<size_t>(l)]; ++b)
            p.dec[static_cast<size_t>(l)].push_back(
                init_restormer_block(c, h, config.gdfn_expansion, rng));
        if (l + 1 < ModelConfig::levels) {
            p.ups.push_back(init_upsample(c, rng));
            p.fuse.push_back(kaiming_conv_weight(c / 2, c, 1, rng)); // concat 2*(c/2) -> c/2
        }
    }

    p.conv_out_w = kaiming_conv_weight(config.out_channels, ch[0], 3, rng);
    p.conv_out_b = Tensor::zeros(Shape{config.out_channels});
    return p;
}

inline Tensor model_forward(const ModelParams& p, const Tensor& x) {
    const ModelConfig& cfg = p.config;
    check(x.ndim() == 4 && x.shape()[1] == cfg.in_channels, "forward: input ", x.shape().str(),
          " does not carry ", cfg.in_channels, " channels");
    const int64_t div = cfg.spatial_divisor();
    check(x.shape()[2] % div == 0 && x.shape()[3] % div == 0, "forward: spatial dims ",
          x.shape().str(), " must be divisible by ", div);

    Tensor h = conv2d(x, p.conv_in);
    std::vector<Tensor> skips;
    for (int l = 0; l < ModelConfig::levels; ++l) {
        for (const auto& blk : p.enc[static_cast<size_t>(l)]) h = restormer_block(h, blk);
        if (l + 1 < ModelConfig::levels) {
            skips.push_back(h);
            h = downsample(h, p.downs[static_cast<size_t>(l)]);
        }
    }
    for (const auto& blk : p.mid) h = restormer_block(h, blk);
    for (const auto& blk : p.mid_spatial) h = spatial_attention(h, blk);

    for (int l = 0; l < ModelConfig::levels; ++l) {
        for (const auto& blk : p.dec[static_cast<size_t>(l)]) h = restormer_block(h, blk);
        if (l + 1 < ModelConfig::levels) {
            h = upsample(h, p.ups[static_cast<size_t>(l)]);
            h = concat({h, skips[static_cast<size_t>(ModelConfig::levels - 2 - l)]}, 1);
            h = conv2d(h, p.fuse[static_cast<size_t>(l)]);
        }
    }
    h = conv2d(h, p.conv_out_w, p.conv_out_b);
    return activation(cfg.output_activation, h);
}

// ---------------------------------------------------------------------------
// Closed-form parameter accounting (matched against enumeration in tests)
// ---------------------------------------------------------------------------

namespace detail {

inline int64_t gdfn_hidden(int64_t c, real expansion) {
    return static_cast<int64_t>(std::ceil(expansion * static_cast<real>(c)));
}

inline int64_t mdta_param_count(int64_t c, int64_t heads) {
    return 4 * c * c + 29 * c + heads; // 2C norm + 3C^2 pw + 27C dw + C^2 out + heads
}

inline int64_t gdfn_param_count(int64_t c, real expansion) {
    const int64_t h = gdfn_hidden(c, expansion);
    return 3 * h * c + 18 * h + 2 * c; // 2hC pw + 18h dw + hC proj + 2C norm
}

inline int64_t block_param_count(int64_t c, int64_t heads, real expansion) {
    return mdta_param_count(c, heads) + gdfn_param_count(c, expansion);
}

inline int64_t spatial_param_count(int64_t c) {
    return 4 * c * c + 2 * c; // four pointwise projections + norm
}

} // namespace detail

inline int64_t count_params(const ModelConfig& cfg) {
    cfg.validate();
    const auto& ch = cfg.level_channels;
    int64_t n = ch[0] * cfg.in_channels * 9; // conv_in
    for (int l = 0; l < ModelConfig::levels; ++l) {
        const int64_t c = ch[static_cast<size_t>(l)];
        n += cfg.encoder_blocks[static_cast<size_t>(l)] *
             detail::block_param_count(c, cfg.heads[static_cast<size_t>(l)], cfg.gdfn_expansion);
        if (l + 1 < ModelConfig::levels) n += (c / 2) * c * 9; // downsample conv
    }
    n += cfg.bottleneck_channel_blocks *
         detail::block_param_count(ch.back(), cfg.bottleneck_heads, cfg.gdfn_expansion);
    n += cfg.bottleneck_spatial_blocks * detail::spatial_param_count(ch.back());
    for (int l = 0; l < ModelConfig::levels; ++l) {
        const int64_t c = ch[static_cast<size_t>(ModelConfig::levels - 1 - l)];
        const int64_t h = cfg.heads[static_cast<size_t>(ModelConfig::levels - 1 - l)];
        n += cfg.decoder_blocks[static_cast<size_t>(l)] *
             detail::block_param_count(c, h, cfg.gdfn_expansion);
        if (l + 1 < ModelConfig::levels) {
            n += 2 * c * c * 9;      // upsample conv [2C, C, 3, 3]
            n += (c / 2) * c;        // fuse [C/2, C, 1, 1]
        }
    }
    n += cfg.out_channels * ch[0] * 9 + cfg.out_channels; // conv_out + bias
    return n;
}

} // namespace uhfsynth
