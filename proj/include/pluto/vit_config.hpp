#pragma once

#include <cstddef>
#include <string>

#include <json.hpp>

#include "pluto/tensor.hpp"

namespace pluto {

/// Backbone geometry. Defaults are the desk-scale configuration.
struct VitConfig {
    std::size_t image_size = 16; // H = W
    std::size_t channels = 1;
    std::size_t patch_size = 4;
    std::size_t embed_dim = 32;
    std::size_t depth = 2;
    std::size_t heads = 4;
    double mlp_ratio = 2.0;
    std::size_t classes = 10;
    double ln_eps = 1e-5;

    std::size_t num_patches() const { return (image_size / patch_size) * (image_size / patch_size); }
    std::size_t patch_dim() const { return patch_size * patch_size * channels; }
    std::size_t mlp_hidden() const { return static_cast<std::size_t>(mlp_ratio * static_cast<double>(embed_dim)); }
    /// Number of LayerNorms: two per block plus the final one.
    std::size_t num_layer_norms() const { return 2 * depth + 1; }

    void validate() const {
        if (image_size == 0 || patch_size == 0 || channels == 0 || embed_dim == 0 || depth == 0 || heads == 0 ||
            classes < 2 || mlp_hidden() == 0)
            throw DomainError("VitConfig: all sizes must be positive and classes >= 2");
        if (image_size % patch_size != 0) throw DomainError("VitConfig: image_size must be a multiple of patch_size");
        if (embed_dim % heads != 0) throw DomainError("VitConfig: embed_dim must be a multiple of heads");
        if (!(ln_eps > 0.0)) throw DomainError("VitConfig: ln_eps must be positive");
    }

    bool operator==(const VitConfig&) const = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(VitConfig, image_size, channels, patch_size, embed_dim, depth, heads,
                                                mlp_ratio, classes, ln_eps)

} // namespace pluto
