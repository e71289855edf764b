/*
 * jjprobe: adversarial fixture processes for jobjail tests.
 *
 *   jjprobe orphaner a=100 b=150
 *   jjprobe memhog total=BYTES [rate=BYTES_PER_S] [touch=0|1] [hold=SEC] [chunk=BYTES]
 *   jjprobe threads n=8 [busy=0|1] [duration=SEC]
 *   jjprobe deeptree depth=50 rss=BYTES [shared=0|1] [hold=SEC]
 *   jjprobe stubborn [duration=SEC]
 *   jjprobe escaper [delay=SEC] [sleep=SEC]
 *   jjprobe spin [duration=SEC]
 *   jjprobe envdump out=PATH
 *
 * Every process appends "pid=P ppid=Q role=R ..." to the file named by
 * JOBJAIL_PROBE_SIDECHANNEL (if set) before doing anything else.
 * A duration/hold of 0 means "until signaled".
 */
#define _GNU_SOURCE
#include <errno.h>
#include <fcntl.h>
#include <pthread.h>
#include <signal.h>
#include <stdarg.h>
#include <stdio.h>
#include <stdlib.h>
#include <string.h>
#include <sys/mman.h>
#include <sys/prctl.h>
#include <sys/types.h>
#include <sys/wait.h>
#include <time.h>
#include <unistd.h>

#define EXIT_USAGE 2
#define EXIT_ALLOC_FAILED 3

extern char **environ;

static int g_argc;
static char **g_argv;

static const char *opt(const char *key, const char *dflt)
{
    size_t n = strlen(key);
    for (int i = 2; i < g_argc; i++)
        if (strncmp(g_argv[i], key, n) == 0 && g_argv[i][n] == '=')
            return g_argv[i] + n + 1;
    return dflt;
}

static long long opt_ll(const char *key, long long dflt)
{
    const char *v = opt(key, NULL);
    return v ? strtoll(v, NULL, 10) : dflt;
}

static double opt_d(const char *key, double dflt)
{
    const char *v = opt(key, NULL);
    return v ? strtod(v, NULL) : dflt;
}

static void report(const char *role, const char *fmt, ...)
{
    char line[512];
    int len;
    const char *path = getenv("JOBJAIL_PROBE_SIDECHANNEL");
    char name[16];

    snprintf(name, sizeof name, "jjp-%s", role);
    prctl(PR_SET_NAME, name, 0, 0, 0);
    if (!path)
        return;
    len = snprintf(line, sizeof line, "pid=%d ppid=%d role=%s", getpid(), getppid(), role);
    if (fmt) {
        va_list ap;
        line[len++] = ' ';
        va_start(ap, fmt);
        len += vsnprintf(line + len, sizeof line - len, fmt, ap);
        va_end(ap);
    }
    line[len++] = '\n';
    int fd = open(path, O_WRONLY | O_APPEND | O_CREAT | O_CLOEXEC, 0644);
    if (fd >= 0) {
        ssize_t w = write(fd, line, len);
        (void)w;
        close(fd);
    }
}

static double now(void)
{
    struct timespec ts;
    clock_gettime(CLOCK_MONOTONIC, &ts);
    return ts.tv_sec + ts.tv_nsec / 1e9;
}

static void sleep_s(double s)
{
    struct timespec ts = {(time_t)s, (long)((s - (time_t)s) * 1e9)};
    while (nanosleep(&ts, &ts) == -1 && errno == EINTR)
        ;
}

static void hold(double s)
{
    if (s <= 0)
        for (;;)
            pause();
    sleep_s(s);
}

static void touch_pages(char *p, size_t n)
{
    long page = sysconf(_SC_PAGESIZE);
    for (size_t off = 0; off < n; off += page)
        p[off] = 1;
}

static int cmd_orphaner(void)
{
    double a = opt_d("a", 100), b = opt_d("b", 150);
    double sleeps[2] = {a, b};
    report("orphaner", NULL);
    for (int i = 0; i < 2; i++) {
        pid_t pid = fork();
        if (pid < 0)
            return 1;
        if (pid == 0) {
            report("sleeper", "seconds=%g", sleeps[i]);
            sleep_s(sleeps[i]);
            _exit(0);
        }
    }
    while (wait(NULL) > 0 || errno == EINTR)
        ;
    return 0;
}

static int cmd_memhog(void)
{
    long long total = opt_ll("total", 1LL << 20);
    double rate = opt_d("rate", 0);
    int touch = (int)opt_ll("touch", 1);
    double hold_s = opt_d("hold", -1);
    long long chunk = opt_ll("chunk", 64LL << 20);
    long long done = 0;
    double t0;
    int flags = MAP_PRIVATE | MAP_ANONYMOUS | (touch ? MAP_POPULATE : 0);

    report("memhog", "total=%lld", total);
    t0 = now();
    while (done < total) {
        size_t n = (size_t)((total - done) < chunk ? (total - done) : chunk);
        char *p = mmap(NULL, n, PROT_READ | PROT_WRITE, flags, -1, 0);
        if (p == MAP_FAILED) {
            fprintf(stderr, "jjprobe memhog: allocation failed after %lld bytes: %s\n",
                    done, strerror(errno));
            report("memhog", "allocated=%lld failed=1", done);
            return EXIT_ALLOC_FAILED;
        }
        if (touch)
            touch_pages(p, n);
        done += n;
        if (rate > 0) {
            double ahead = done / rate - (now() - t0);
            if (ahead > 0)
                sleep_s(ahead);
        }
    }
    report("memhog", "allocated=%lld failed=0 seconds=%.3f", done, now() - t0);
    if (hold_s >= 0)
        hold(hold_s);
    return 0;
}

static volatile int g_stop;

static void *worker(void *arg)
{
    volatile unsigned long x = 0;
    if (arg)
        while (!g_stop)
            x++;
    else
        while (!g_stop)
            pause();
    return NULL;
}

static int self_threads(void)
{
    char line[256];
    int n = -1;
    FILE *fh = fopen("/proc/self/status", "r");
    if (!fh)
        return -1;
    while (fgets(line, sizeof line, fh))
        if (sscanf(line, "Threads: %d", &n) == 1)
            break;
    fclose(fh);
    return n;
}

static int cmd_threads(void)
{
    int n = (int)opt_ll("n", 8);
    int busy = (int)opt_ll("busy", 0);
    double duration = opt_d("duration", 0);
    pthread_t tid;

    prctl(PR_SET_NAME, "jjp-threads", 0, 0, 0);
    for (int i = 0; i < n; i++)
        if (pthread_create(&tid, NULL, worker, busy ? (void *)1 : NULL) != 0)
            return 1;
    report("threads", "threads=%d", self_threads());
    hold(duration);
    return 0;
}

static int cmd_deeptree(void)
{
    int depth = (int)opt_ll("depth", 50);
    long long rss = opt_ll("rss", 100LL << 20);
    int shared = (int)opt_ll("shared", 0);
    double hold_s = opt_d("hold", 0);
    char *region = NULL;

    if (shared && rss > 0) {
        region = mmap(NULL, rss, PROT_READ | PROT_WRITE, MAP_SHARED | MAP_ANONYMOUS, -1, 0);
        if (region == MAP_FAILED)
            return EXIT_ALLOC_FAILED;
    }
    for (int level = 1;; level++) {
        char *own = region;
        if (!shared && rss > 0) {
            own = mmap(NULL, rss, PROT_READ | PROT_WRITE, MAP_PRIVATE | MAP_ANONYMOUS, -1, 0);
            if (own == MAP_FAILED)
                return EXIT_ALLOC_FAILED;
        }
        if (own)
            touch_pages(own, rss);
        report("deeptree", "level=%d rss_each=%lld", level, rss);
        if (level >= depth)
            break;
        pid_t pid = fork();
        if (pid < 0)
            return 1;
        if (pid > 0) {
            int st;
            while (waitpid(pid, &st, 0) < 0 && errno == EINTR)
                ;
            hold(hold_s);
            return 0;
        }
        if (!shared && own)
            munmap(own, rss);
    }
    hold(hold_s);
    return 0;
}

static int cmd_stubborn(void)
{
    signal(SIGTERM, SIG_IGN);
    report("stubborn", NULL);
    hold(opt_d("duration", 0));
    return 0;
}

static int cmd_escaper(void)
{
    double delay = opt_d("delay", 1);
    double sleep_for = opt_d("sleep", 0);
    report("escaper", NULL);
    pid_t pid = fork();
    if (pid < 0)
        return 1;
    if (pid == 0) {
        report("escaper-child", NULL);
        sleep_s(delay);
        setsid();
        report("escaper-child", "setsid=1");
        if (fork() == 0) {
            report("escapee", NULL);
            hold(sleep_for);
            _exit(0);
        }
        hold(sleep_for);
        _exit(0);
    }
    hold(sleep_for);
    return 0;
}

static int cmd_spin(void)
{
    double duration = opt_d("duration", 10);
    double end = now() + duration;
    volatile unsigned long x = 0;
    report("spin", NULL);
    while (duration <= 0 || now() < end)
        for (int i = 0; i < 1000000; i++)
            x++;
    return 0;
}

static int cmd_envdump(void)
{
    const char *out = opt("out", NULL);
    report("envdump", NULL);
    if (!out)
        return EXIT_USAGE;
    FILE *fh = fopen(out, "wb");
    if (!fh)
        return 1;
    for (char **e = environ; *e; e++)
        fwrite(*e, 1, strlen(*e) + 1, fh);
    fclose(fh);
    return 0;
}

int main(int argc, char **argv)
{
    g_argc = argc;
    g_argv = argv;
    if (argc < 2) {
        fprintf(stderr, "usage: jjprobe orphaner|memhog|threads|deeptree|stubborn|escaper|spin|envdump [key=value...]\n");
        return EXIT_USAGE;
    }
    if (!strcmp(argv[1], "orphaner"))
        return cmd_orphaner();
    if (!strcmp(argv[1], "memhog"))
        return cmd_memhog();
    if (!strcmp(argv[1], "threads"))
        return cmd_threads();
    if (!strcmp(argv[1], "deeptree"))
        return cmd_deeptree();
    if (!strcmp(argv[1], "stubborn"))
        return cmd_stubborn();
    if (!strcmp(argv[1], "escaper"))
        return cmd_escaper();
    if (!strcmp(argv[1], "spin"))
        return cmd_spin();
    if (!strcmp(argv[1], "envdump"))
        return cmd_envdump();
    fprintf(stderr, "jjprobe: unknown probe %s\n", argv[1]);
    return EXIT_USAGE;
}
