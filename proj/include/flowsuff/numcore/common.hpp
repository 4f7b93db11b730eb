#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <stdexcept>
#include <string>

namespace flowsuff {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;
using Index = Eigen::Index;

// Error hierarchy. Each category maps to a CLI exit code (see io/pipeline.hpp).
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ContractViolation : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class DataError : public Error {
public:
    using Error::Error;
};

class CorruptFileError : public DataError {
public:
    using DataError::DataError;
};

class AlignmentError : public DataError {
public:
    using DataError::DataError;
};

class TrainingDivergence : public Error {
public:
    using Error::Error;
};

class DensityError : public Error {
public:
    DensityError(const std::string& what, int layer) : Error(what), layer_(layer) {}
    int layer() const noexcept { return layer_; }

private:
    int layer_;
};

class InvertibilityError : public Error {
public:
    using Error::Error;
};

#define FLOWSUFF_EXPECT(cond, msg)                                                   \
    do {                                                                             \
        if (!(cond)) throw ::flowsuff::ContractViolation(std::string(msg));          \
    } while (0)

inline constexpr double kLog2Pi = 1.8378770664093454835606594728112;

}  // namespace flowsuff
