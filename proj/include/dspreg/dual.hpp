#pragma once

#include <cmath>
#include <ostream>

namespace dspreg {

/// Forward-mode dual number. Running the reverse-mode tape over Dual<double>
/// with parameter tangents v yields gradient tangents equal to H v.
template <class T>
struct Dual {
  T value{};
  T tangent{};

  constexpr Dual() = default;
  constexpr Dual(T v) : value(v) {}  // NOLINT(google-explicit-constructor)
  constexpr Dual(T v, T t) : value(v), tangent(t) {}

  Dual& operator+=(const Dual& o) {
    value += o.value;
    tangent += o.tangent;
    return *this;
  }
  Dual& operator-=(const Dual& o) {
    value -= o.value;
    tangent -= o.tangent;
    return *this;
  }
  Dual& operator*=(const Dual& o) {
    tangent = tangent * o.value + value * o.tangent;
    value *= o.value;
    return *this;
  }
  Dual& operator/=(const Dual& o) {
    tangent = (tangent * o.value - value * o.tangent) / (o.value * o.value);
    value /= o.value;
    return *this;
  }
};

template <class T> Dual<T> operator+(Dual<T> a, const Dual<T>& b) { return a += b; }
template <class T> Dual<T> operator-(Dual<T> a, const Dual<T>& b) { return a -= b; }
template <class T> Dual<T> operator*(Dual<T> a, const Dual<T>& b) { return a *= b; }
template <class T> Dual<T> operator/(Dual<T> a, const Dual<T>& b) { return a /= b; }
template <class T> Dual<T> operator+(Dual<T> a, T b) { return a += Dual<T>(b); }
template <class T> Dual<T> operator+(T a, Dual<T> b) { return b += Dual<T>(a); }
template <class T> Dual<T> operator-(Dual<T> a, T b) { return a -= Dual<T>(b); }
template <class T> Dual<T> operator-(T a, const Dual<T>& b) { return Dual<T>(a) - b; }
template <class T> Dual<T> operator*(Dual<T> a, T b) { return {a.value * b, a.tangent * b}; }
template <class T> Dual<T> operator*(T a, Dual<T> b) { return {a * b.value, a * b.tangent}; }
template <class T> Dual<T> operator/(Dual<T> a, T b) { return {a.value / b, a.tangent / b}; }
template <class T> Dual<T> operator-(const Dual<T>& a) { return {-a.value, -a.tangent}; }

template <class T> bool operator<(const Dual<T>& a, const Dual<T>& b) { return a.value < b.value; }
template <class T> bool operator>(const Dual<T>& a, const Dual<T>& b) { return a.value > b.value; }
template <class T> bool operator==(const Dual<T>& a, const Dual<T>& b) {
  return a.value == b.value && a.tangent == b.tangent;
}

template <class T> Dual<T> exp(const Dual<T>& a) {
  using std::exp;
  const T e = exp(a.value);
  return {e, e * a.tangent};
}
template <class T> Dual<T> log(const Dual<T>& a) {
  using std::log;
  return {log(a.value), a.tangent / a.value};
}
template <class T> Dual<T> tanh(const Dual<T>& a) {
  using std::tanh;
  const T t = tanh(a.value);
  return {t, (T{1} - t * t) * a.tangent};
}
template <class T> Dual<T> sqrt(const Dual<T>& a) {
  using std::sqrt;
  const T s = sqrt(a.value);
  return {s, a.tangent / (T{2} * s)};
}

template <class T> std::ostream& operator<<(std::ostream& os, const Dual<T>& d) {
  return os << d.value << "+" << d.tangent << "e";
}

inline double value_of(double x) { return x; }
template <class T> T value_of(const Dual<T>& x) { return x.value; }

}  // namespace dspreg
