#pragma once

#include <stdexcept>
#include <string>

namespace df {

struct EmptyRegion : std::runtime_error {
    explicit EmptyRegion(const std::string& what) : std::runtime_error(what) {}
};

struct ShapeMismatch : std::runtime_error {
    explicit ShapeMismatch(const std::string& what) : std::runtime_error(what) {}
};

struct ChannelMismatch : std::runtime_error {
    explicit ChannelMismatch(const std::string& what) : std::runtime_error(what) {}
};

struct UnsupportedKernel : std::runtime_error {
    explicit UnsupportedKernel(const std::string& what) : std::runtime_error(what) {}
};

struct NotScalar : std::runtime_error {
    explicit NotScalar(const std::string& what) : std::runtime_error(what) {}
};

struct UnknownTap : std::runtime_error {
    explicit UnknownTap(const std::string& what) : std::runtime_error(what) {}
};

struct InputTooSmall : std::runtime_error {
    explicit InputTooSmall(const std::string& what) : std::runtime_error(what) {}
};

struct RegionTooSmall : std::runtime_error {
    explicit RegionTooSmall(const std::string& what) : std::runtime_error(what) {}
};

struct WeightsMismatch : std::runtime_error {
    explicit WeightsMismatch(const std::string& what) : std::runtime_error(what) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

struct CropTooLarge : std::runtime_error {
    explicit CropTooLarge(const std::string& what) : std::runtime_error(what) {}
};

struct AlignmentError : std::runtime_error {
    explicit AlignmentError(const std::string& what) : std::runtime_error(what) {}
};

struct NoData : std::runtime_error {
    explicit NoData(const std::string& what) : std::runtime_error(what) {}
};

struct Diverged : std::runtime_error {
    std::size_t iteration;
    Diverged(const std::string& what, std::size_t iter)
        : std::runtime_error(what), iteration(iter) {}
};

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace df
