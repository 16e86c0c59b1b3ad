#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace fptq {

inline constexpr const char* kToolVersion = "0.1.0";
inline constexpr int kReportSchemaVersion = 1;

using index_t = std::ptrdiff_t;

// Storage precision tag. All arithmetic is done in double; tensors tagged
// f32 are rounded through IEEE single precision after every producing op,
// so an f32 pipeline carries exactly representable float values.
enum class Dtype : std::uint8_t { f32, f64 };

inline const char* dtype_name(Dtype d) { return d == Dtype::f32 ? "f32" : "f64"; }

inline Dtype dtype_from_name(const std::string& s) {
    if (s == "f32") return Dtype::f32;
    if (s == "f64") return Dtype::f64;
    throw std::invalid_argument("unknown dtype: " + s);
}

// Wider dtype wins when operands mix.
inline Dtype promote(Dtype a, Dtype b) {
    return (a == Dtype::f64 || b == Dtype::f64) ? Dtype::f64 : Dtype::f32;
}

// Thrown when an algorithm fails numerically (singular matrix, divergence,
// non-finite objective). Maps to CLI exit code 3; validation errors are
// std::invalid_argument and map to exit code 2.
class NumericalError : public std::runtime_error {
public:
    explicit NumericalError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace fptq
