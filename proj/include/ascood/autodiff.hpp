#pragma once

#include <cmath>
#include <concepts>
#include <type_traits>

#include "ascood/core.hpp"

namespace ascood {

/// Forward-mode dual number: value + derivative along one seeded direction.
template <typename T>
struct Dual {
  T value = T(0);
  T deriv = T(0);

  constexpr Dual() = default;
  template <typename U>
    requires std::is_arithmetic_v<U>
  constexpr Dual(U v) : value(static_cast<T>(v)) {}  // NOLINT(google-explicit-constructor)
  constexpr Dual(T v, T d) : value(v), deriv(d) {}

  explicit constexpr operator double() const { return static_cast<double>(value); }

  Dual& operator+=(const Dual& o) { value += o.value; deriv += o.deriv; return *this; }
  Dual& operator-=(const Dual& o) { value -= o.value; deriv -= o.deriv; return *this; }
  Dual& operator*=(const Dual& o) { *this = *this * o; return *this; }
  Dual& operator/=(const Dual& o) { *this = *this / o; return *this; }

  friend Dual operator+(Dual a, const Dual& b) { return a += b; }
  friend Dual operator-(Dual a, const Dual& b) { return a -= b; }
  friend Dual operator-(const Dual& a) { return {-a.value, -a.deriv}; }
  friend Dual operator*(const Dual& a, const Dual& b) {
    return {a.value * b.value, a.deriv * b.value + a.value * b.deriv};
  }
  friend Dual operator/(const Dual& a, const Dual& b) {
    return {a.value / b.value, (a.deriv * b.value - a.value * b.deriv) / (b.value * b.value)};
  }
  friend bool operator<(const Dual& a, const Dual& b) { return a.value < b.value; }
  friend bool operator>(const Dual& a, const Dual& b) { return a.value > b.value; }
  friend bool operator<=(const Dual& a, const Dual& b) { return a.value <= b.value; }
  friend bool operator>=(const Dual& a, const Dual& b) { return a.value >= b.value; }

  friend Dual exp(const Dual& a) {
    const T e = std::exp(a.value);
    return {e, a.deriv * e};
  }
  friend Dual log(const Dual& a) { return {std::log(a.value), a.deriv / a.value}; }
  friend Dual sqrt(const Dual& a) {
    const T s = std::sqrt(a.value);
    return {s, a.deriv / (T(2) * s)};
  }
};

/// d loss_total / d logits, one forward-mode sweep per logit entry.
struct LossGradient {
  Tensor<double> id;
  Tensor<double> ood;
};

inline LossGradient autodiff_logit_gradient(const Tensor<double>& logits_id, const Tensor<double>& labels,
                                            const Tensor<double>& logits_ood, double lambda) {
  using D = Dual<double>;
  auto lift = [](const Tensor<double>& t) {
    Tensor<D> out(t.shape());
    for (std::size_t i = 0; i < t.size(); ++i) out[i] = D(t[i]);
    return out;
  };
  Tensor<D> zi = lift(logits_id);
  Tensor<D> zo = lift(logits_ood);
  const Tensor<D> y = lift(labels);

  LossGradient g{Tensor<double>(logits_id.shape()), Tensor<double>(logits_ood.shape())};
  for (std::size_t i = 0; i < zi.size(); ++i) {
    zi[i].deriv = 1.0;
    g.id[i] = loss_total(zi, y, zo, lambda).total.deriv;
    zi[i].deriv = 0.0;
  }
  for (std::size_t i = 0; i < zo.size(); ++i) {
    zo[i].deriv = 1.0;
    g.ood[i] = loss_total(zi, y, zo, lambda).total.deriv;
    zo[i].deriv = 0.0;
  }
  return g;
}

}  // namespace ascood
