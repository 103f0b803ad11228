#include "coswin/verify.hpp"
int main() { return 0; }
