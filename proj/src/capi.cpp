extern "C" const char* mp_last_error(void) { return ""; }
