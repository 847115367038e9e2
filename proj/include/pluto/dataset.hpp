#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pluto/container.hpp"

namespace pluto {

/// Labelled images, each Tensor[H×W×C] with values in [0,1].
struct Dataset {
    std::vector<Tensor> images;
    std::vector<std::size_t> labels;
    std::string label; // domain label, e.g. "blur:sev3"

    std::size_t size() const noexcept { return images.size(); }
    bool empty() const noexcept { return images.empty(); }

    Dataset slice(std::size_t begin, std::size_t end) const {
        Dataset d;
        d.label = label;
        end = std::min(end, size());
        for (std::size_t i = begin; i < end; ++i) {
            d.images.push_back(images[i]);
            d.labels.push_back(labels[i]);
        }
        return d;
    }

    bool operator==(const Dataset&) const = default;
};

/// Dataset dump: kind "dataset", tensors "images" f32 [n×H×W×C] and "labels" u16 [n].
inline Bytes serialize_dataset(const Dataset& ds, const std::string& id) {
    if (ds.empty()) throw DomainError("cannot serialise an empty dataset");
    Shape s{ds.size()};
    for (auto v : ds.images.front().shape()) s.push_back(v);
    Tensor imgs(s);
    const std::size_t per = ds.images.front().size();
    for (std::size_t i = 0; i < ds.size(); ++i) {
        if (ds.images[i].size() != per) throw DimensionError("dataset images differ in size");
        std::copy(ds.images[i].data().begin(), ds.images[i].data().end(), imgs.data().begin() + i * per);
    }
    Tensor labels({ds.size()});
    for (std::size_t i = 0; i < ds.size(); ++i) labels[i] = static_cast<double>(ds.labels[i]);
    Container c;
    c.id = id;
    c.domain_label = ds.label;
    c.kind = "dataset";
    c.hyper = {{"count", ds.size()}};
    c.tensors.push_back({"images", std::move(imgs), DType::f32});
    c.tensors.push_back({"labels", std::move(labels), DType::u16});
    return encode_container(c);
}

inline Dataset deserialize_dataset(std::span<const std::uint8_t> bytes) {
    const Container c = decode_container(bytes);
    if (c.kind != "dataset") throw FormatError("container kind " + c.kind + " is not a dataset");
    const Tensor& imgs = c.tensor("images");
    const Tensor& labels = c.tensor("labels");
    if (imgs.rank() < 2 || labels.size() != imgs.dim(0)) throw ShapeMismatchError("dataset tensors disagree");
    Shape img_shape(imgs.shape().begin() + 1, imgs.shape().end());
    const std::size_t per = shape_numel(img_shape);
    Dataset ds;
    ds.label = c.domain_label;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        std::vector<double> px(imgs.data().begin() + i * per, imgs.data().begin() + (i + 1) * per);
        ds.images.emplace_back(img_shape, std::move(px));
        ds.labels.push_back(static_cast<std::size_t>(labels[i]));
    }
    return ds;
}

} // namespace pluto
