#include <stdio.h>
#include <stdlib.h>
#include "lensopt.h"

static char *slurp(const char *path) {
    FILE *f = fopen(path, "rb");
    if (!f) return NULL;
    fseek(f, 0, SEEK_END);
    long n = ftell(f);
    rewind(f);
    char *s = malloc(n + 1);
    fread(s, 1, n, f);
    s[n] = 0;
    fclose(f);
    return s;
}

int main(int argc, char **argv) {
    char *text = slurp(argv[1]);
    LensoptSystem *sys = NULL;
    if (lensopt_system_parse(text, &sys) != LENSOPT_STATUS_OK) {
        fprintf(stderr, "%s\n", lensopt_last_error());
        return 1;
    }
    free(text);
    double effl = 0.0;
    size_t surfaces = 0;
    lensopt_system_effl(sys, &effl);
    lensopt_system_surface_count(sys, &surfaces);
    printf("%zu %.6f\n", surfaces, effl);
    if (lensopt_system_parse("[surface]\nbogus = 1\n", &sys) != LENSOPT_STATUS_PARSE) return 2;
    printf("%s\n", lensopt_last_error());
    lensopt_system_free(sys);
    return 0;
}
