#pragma once

#include <stdexcept>
#include <string>

namespace lmc {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct InvalidInput : Error {
    using Error::Error;
};
struct ShapeError : Error {
    using Error::Error;
};
struct ConfigError : Error {
    using Error::Error;
};
struct NumericError : Error {
    using Error::Error;
};
struct CorruptGrid : Error {
    using Error::Error;
};
struct DecodeError : Error {
    using Error::Error;
};
struct UnsupportedFormat : Error {
    using Error::Error;
};
struct IoError : Error {
    using Error::Error;
};
struct EmptyDataset : Error {
    using Error::Error;
};
struct StratifyError : Error {
    using Error::Error;
};
struct FormatError : Error {
    using Error::Error;
};
struct CorruptCheckpoint : Error {
    using Error::Error;
};

}  // namespace lmc
