#pragma once

#include <functional>
#include <vector>

namespace fptq {

using ScalarFn = std::function<double(const std::vector<double>&)>;

// Central differences (f(x+h e_i) - f(x-h e_i)) / 2h per coordinate.
// Throws NumericalError if any evaluation is non-finite.
std::vector<double> finite_diff_grad(const ScalarFn& f, const std::vector<double>& theta, double h);

}  // namespace fptq
